// Full-model composition: environment tokens feed route-choice tokens feed
// the trajectory encoder.  Shared by pretraining, fine-tuning, and export.

#pragma once

#include "prtraj/enc.hpp"
#include "prtraj/env.hpp"
#include "prtraj/route.hpp"

#include <map>
#include <optional>
#include <random>
#include <vector>

namespace prtraj::model {

// Mean inter-point gap per segment on the training split, with a global
// fallback for segments never observed.
struct AvgTimes {
  std::map<int, double> per_seg;
  double global = 0.0;

  double lookup(int seg) const {
    auto it = per_seg.find(seg);
    return it == per_seg.end() ? global : it->second;
  }
};

AvgTimes build_avg_times(const std::vector<geo::Trajectory>& trajs);

struct ModelConfig {
  env::EnvConfig env;
  enc::EncoderConfig enc;
  // Ablation switch: bypass route choice and feed environment tokens
  // straight into the encoder.
  bool use_route_choice = true;

  int d() const;  // common width, validated
};

// Everything a forward pass needs besides parameters.
struct ModelInputs {
  const geo::RoadNetwork* net = nullptr;
  Eigen::MatrixXd p_fine;   // |V| x d granular semantic vectors
  env::CoarseField field;   // zonal semantic grids
  route::TransitionStats stats;
  AvgTimes avg_times;
};

// Registers env + route + encoder parameters plus the mask embedding
// (`pretrain.mask`) and the untied vocabulary head (`pretrain.vocab_head`).
void register_model_params(nn::ParamStore& store, const ModelConfig& cfg,
                           Eigen::Index vocab);

// Random init; the vocabulary head is zeroed so an untrained model scores
// every segment equally.
void init_model_params(nn::ParamStore& store, std::uint64_t seed);

// Environment tokens for every segment (|V| x d).  Call once per tape.
ad::Var env_tokens(ad::Tape& t, nn::Binder& b, const ModelConfig& cfg,
                   const ModelInputs& in);

// Replaces the listed rows of the choice-token matrix with the learned mask
// embedding; all other rows pass through untouched.
ad::Var masked_choice(ad::Tape& t, nn::Binder& b, ad::Var choice,
                      const std::vector<std::size_t>& masked);

// choice tokens -> point embeddings -> Transformer.  `masked` substitutes
// the mask embedding at those positions (temporal terms kept); rng enables
// dropout.
enc::Encoded encode_trajectory(ad::Tape& t, nn::Binder& b, const ModelConfig& cfg,
                               const ModelInputs& in, ad::Var toks,
                               const geo::Trajectory& traj,
                               const std::vector<std::size_t>* masked = nullptr,
                               std::mt19937_64* rng = nullptr);

}  // namespace prtraj::model
