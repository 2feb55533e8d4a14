#include "prtraj/model.hpp"

#include "prtraj/util.hpp"

namespace prtraj::model {

AvgTimes build_avg_times(const std::vector<geo::Trajectory>& trajs) {
  AvgTimes out;
  std::map<int, std::pair<double, std::int64_t>> acc;
  double total = 0.0;
  std::int64_t count = 0;
  for (const auto& traj : trajs) {
    for (std::size_t i = 0; i + 1 < traj.size(); ++i) {
      const double gap = static_cast<double>(traj.ts[i + 1] - traj.ts[i]);
      auto& [sum, k] = acc[traj.segs[i]];
      sum += gap;
      ++k;
      total += gap;
      ++count;
    }
  }
  for (const auto& [seg, sk] : acc) out.per_seg[seg] = sk.first / static_cast<double>(sk.second);
  out.global = count > 0 ? total / static_cast<double>(count) : 0.0;
  return out;
}

int ModelConfig::d() const {
  if (env.d != enc.d)
    throw util::InputError("model: environment and encoder widths disagree");
  return env.d;
}

void register_model_params(nn::ParamStore& store, const ModelConfig& cfg,
                           Eigen::Index vocab) {
  const int d = cfg.d();
  env::register_env_params(store, cfg.env);
  route::register_route_params(store, d);
  enc::register_encoder_params(store, cfg.enc);
  store.create("pretrain.mask", 1, d);
  store.create("pretrain.vocab_head", vocab, d);
}

void init_model_params(nn::ParamStore& store, std::uint64_t seed) {
  nn::init_params(store, seed);
  store.get("pretrain.vocab_head").value.setZero();
}

ad::Var env_tokens(ad::Tape& t, nn::Binder& b, const ModelConfig& cfg,
                   const ModelInputs& in) {
  if (in.net == nullptr) throw util::InputError("model: road network not set");
  return env::env_forward(t, b, cfg.env, *in.net, in.p_fine, in.field);
}

ad::Var masked_choice(ad::Tape& t, nn::Binder& b, ad::Var choice,
                      const std::vector<std::size_t>& masked) {
  const Eigen::Index n = t.value(choice).rows();
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = i;
  for (std::size_t pos : masked) {
    if (pos >= static_cast<std::size_t>(n))
      throw util::InputError("masked position out of range");
    rows[pos] = n;  // the appended mask row
  }
  ad::Var padded = t.concat_rows({choice, b("pretrain.mask")});
  return t.row_gather(padded, rows);
}

enc::Encoded encode_trajectory(ad::Tape& t, nn::Binder& b, const ModelConfig& cfg,
                               const ModelInputs& in, ad::Var toks,
                               const geo::Trajectory& traj,
                               const std::vector<std::size_t>* masked,
                               std::mt19937_64* rng) {
  const int d = cfg.d();
  ad::Var choice;
  if (cfg.use_route_choice) {
    choice = route::route_forward(t, b, d, *in.net, in.stats, traj, toks);
  } else {
    std::vector<Eigen::Index> rows(traj.size());
    for (std::size_t i = 0; i < traj.size(); ++i) rows[i] = traj.segs[i];
    choice = t.row_gather(toks, rows);
  }
  if (masked != nullptr && !masked->empty()) choice = masked_choice(t, b, choice, *masked);
  ad::Var x = enc::point_embeddings(t, b, cfg.enc, choice, traj.ts);
  return enc::encode(t, b, cfg.enc, x, rng);
}

}  // namespace prtraj::model
