// Trajectory encoder: temporal embeddings over local calendar indices, a
// learnable CLS token, and a pre-norm Transformer producing one vector for
// the whole trajectory plus one per step.

#pragma once

#include "prtraj/nn.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace prtraj::enc {

struct EncoderConfig {
  int d = 128;
  int layers = 6;
  int heads = 4;
  double dropout = 0.1;
  int max_len = 128;           // positions, excluding the CLS slot
  int tz_offset_minutes = 0;   // dataset-local timezone as a fixed UTC offset

  int head_dim() const;  // validates divisibility
};

// Calendar indices in the dataset's local timezone (0-based internally).
int minute_of_day(std::int64_t ts_utc, int tz_offset_minutes);  // [0, 1439]
int day_of_week(std::int64_t ts_utc, int tz_offset_minutes);    // Monday = 0

// Registers every parameter of this module under the `enc.` prefix.
void register_encoder_params(nn::ParamStore& store, const EncoderConfig& cfg);

// x_i = choice token + minute-of-day row + day-of-week row + positional row
// (position i occupies slot i+1; slot 0 belongs to the CLS token).
ad::Var point_embeddings(ad::Tape& t, nn::Binder& b, const EncoderConfig& cfg,
                         ad::Var choice_tokens, const std::vector<std::int64_t>& ts);

struct Encoded {
  ad::Var traj;   // 1 x d, state at the CLS position
  ad::Var steps;  // n x d, one state per real position
};

// Encodes one sequence (n x d).  With rng set and dropout > 0 the residual
// branches are dropped out, otherwise the pass is deterministic.
Encoded encode(ad::Tape& t, nn::Binder& b, const EncoderConfig& cfg, ad::Var x,
               std::mt19937_64* rng = nullptr);

// Same pass over a zero-padded buffer (len_padded x d) of which only the
// first n_real rows are real; attention is masked so padding slots never
// influence a real position.
Encoded encode_padded(ad::Tape& t, nn::Binder& b, const EncoderConfig& cfg, ad::Var x_padded,
                      std::size_t n_real, std::mt19937_64* rng = nullptr);

// Embedding export: text (`traj_id,v1,...,vd` per line) and a binary variant
// (per record: int64 id then d little-endian float32 values).
void write_embeddings_text(const std::string& path, const std::vector<std::string>& ids,
                           const Eigen::MatrixXd& rows);
void write_embeddings_binary(const std::string& path, const std::vector<std::int64_t>& ids,
                             const Eigen::MatrixXd& rows);

}  // namespace prtraj::enc
