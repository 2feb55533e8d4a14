// Environment perception: base attribute embeddings, fine-grained cross
// attention over neighboring segments' POI semantics, coarse-grained grid
// diffusion with category attention, and gated fusion into one token per
// segment.

#pragma once

#include "prtraj/geo.hpp"
#include "prtraj/nn.hpp"

#include <string>
#include <vector>

namespace prtraj::env {

struct EnvConfig {
  int d = 128;
  int heads = 4;
  int n_road_types = 8;  // known type ids 0..n-1; anything else uses a reserved row
  int n_categories = 14;
  int len_buckets = 16;
  double len_min = 1.0;      // meters
  double len_max = 10000.0;  // meters

  int head_dim() const;  // d / heads; throws if d is not divisible
};

// Per-category semantic grids over one shared index.  grids[c] is
// cell_count x d with zero rows wherever valid[c] is false.
struct CoarseField {
  geo::GridIndex gi;
  std::vector<Eigen::MatrixXd> grids;
  std::vector<std::vector<char>> valid;
};

int length_bucket(const EnvConfig& cfg, double length_m);
int type_row(const EnvConfig& cfg, int road_type);
int clip_degree(int degree);

// Registers every parameter of this module under the `env.` prefix.
void register_env_params(nn::ParamStore& store, const EnvConfig& cfg);

// Post-diffusion validity: true iff any cell of the 3x3 neighborhood was
// valid before diffusion.
std::vector<char> diffuse_indicator(const geo::GridIndex& gi, const std::vector<char>& valid);

// Flat cell id of each segment's midpoint.
std::vector<int> segment_cells(const geo::RoadNetwork& net, const geo::GridIndex& gi);

// Base tokens for all segments: sum of type, length-bucket, in-degree, and
// out-degree embedding rows (|V| x d).
ad::Var base_embeddings(ad::Tape& t, nn::Binder& b, const EnvConfig& cfg,
                        const geo::RoadNetwork& net);

// Multi-head graph attention: each segment's token queries the POI semantic
// vectors of its adjacent segments (|V| x d in, |V| x d out).  Rows with an
// empty neighborhood come back as their own projected semantics.
ad::Var cross_gat(ad::Tape& t, nn::Binder& b, const EnvConfig& cfg,
                  const geo::RoadNetwork& net, ad::Var p_fine, ad::Var r);

// One 3x3 learned-kernel diffusion pass with zero padding (cell_count x d).
ad::Var diffuse_grid(ad::Tape& t, nn::Binder& b, const EnvConfig& cfg,
                     const geo::GridIndex& gi, const Eigen::MatrixXd& grid);

// Attention of each segment over the valid diffused category rows at its own
// cell; segments whose cell has no valid category get a zero row.
ad::Var coarse_attention(ad::Tape& t, nn::Binder& b, const EnvConfig& cfg, ad::Var r,
                         const std::vector<ad::Var>& diffused,
                         const std::vector<std::vector<char>>& post_valid,
                         const std::vector<int>& seg_cell);

// Gated fusion: r + p_fine ⊙ tanh(gate_f([p_fine ∥ r])) + p_coarse ⊙
// tanh(gate_c([p_coarse ∥ r])).
ad::Var fuse(ad::Tape& t, nn::Binder& b, const EnvConfig& cfg, ad::Var r, ad::Var p_fine_t,
             ad::Var p_coarse_t);

// Full pass over the network: environment-aware tokens for every segment.
ad::Var env_forward(ad::Tape& t, nn::Binder& b, const EnvConfig& cfg,
                    const geo::RoadNetwork& net, const Eigen::MatrixXd& p_fine,
                    const CoarseField& field);

}  // namespace prtraj::env
