#include "prtraj/pretrain.hpp"

#include "prtraj/util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace prtraj::pretrain {

using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

MaskPlan span_mask(const geo::Trajectory& traj, std::mt19937_64& rng) {
  const std::size_t n = traj.size();
  if (n < 4) {
    throw util::InputError("span_mask: trajectory too short to mask (need 4 points, got " +
                           std::to_string(n) + ")");
  }
  const std::size_t target = std::max<std::size_t>(1, n * 15 / 100);

  // Span lengths are geometric with mean 3 (1 + failures at p = 1/3), but a
  // span never overshoots: the last one is truncated so coverage lands on
  // the target exactly.
  std::geometric_distribution<std::size_t> extra(1.0 / 3.0);
  std::uniform_int_distribution<std::size_t> u;

  std::vector<char> used(n, 0);
  MaskPlan plan;
  std::size_t covered = 0;
  int attempts = 0;
  while (covered < target) {
    std::size_t len = std::min(1 + extra(rng), target - covered);
    len = std::min(len, n);
    std::size_t start =
        u(rng, std::uniform_int_distribution<std::size_t>::param_type(0, n - len));
    bool free = true;
    for (std::size_t i = start; i < start + len; ++i) {
      if (used[i]) { free = false; break; }
    }
    if (!free) {
      // Coverage is capped at 15%, so free slots always exist; after enough
      // rejections fall back to the first free position to stay bounded.
      if (++attempts > 1000) {
        for (std::size_t i = 0; i < n; ++i) {
          if (!used[i]) { start = i; len = 1; free = true; break; }
        }
      }
      if (!free) continue;
    }
    for (std::size_t i = start; i < start + len; ++i) used[i] = 1;
    plan.spans.emplace_back(start, len);
    covered += len;
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (used[i]) {
      plan.masked.push_back(i);
      plan.targets[i] = traj.segs[i];
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Augmentations
// ---------------------------------------------------------------------------

std::pair<std::size_t, std::size_t> crop_bounds(std::size_t n, double u, bool drop_tail) {
  const std::size_t k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(u * static_cast<double>(n))));
  if (n < k + 2) return {0, n};  // would leave fewer than 2 points: keep all
  return drop_tail ? std::pair<std::size_t, std::size_t>{0, n - k}
                   : std::pair<std::size_t, std::size_t>{k, n - k};
}

geo::Trajectory crop_augment(const geo::Trajectory& traj, std::mt19937_64& rng) {
  const std::size_t n = traj.size();
  if (n < 4) return traj;
  std::uniform_real_distribution<double> ud(0.05, 0.15);
  const double u = ud(rng);
  const bool drop_tail = (rng() & 1u) != 0;
  auto [start, len] = crop_bounds(n, u, drop_tail);
  geo::Trajectory out;
  out.segs.assign(traj.segs.begin() + static_cast<std::ptrdiff_t>(start),
                  traj.segs.begin() + static_cast<std::ptrdiff_t>(start + len));
  out.ts.assign(traj.ts.begin() + static_cast<std::ptrdiff_t>(start),
                traj.ts.begin() + static_cast<std::ptrdiff_t>(start + len));
  return out;
}

std::int64_t perturb_gap(std::int64_t gap, double avg, double r) {
  const double moved = static_cast<double>(gap) - r * (static_cast<double>(gap) - avg);
  return std::max<std::int64_t>(0, std::llround(moved));
}

geo::Trajectory temporal_perturb(const geo::Trajectory& traj, std::mt19937_64& rng,
                                 const model::AvgTimes& avg) {
  geo::Trajectory out = traj;
  const std::size_t n = traj.size();
  if (n < 2) return out;
  std::uniform_real_distribution<double> sel(0.0, 1.0);
  std::uniform_real_distribution<double> rd(0.15, 0.30);
  std::int64_t prev = traj.ts[0];
  for (std::size_t i = 0; i + 1 < n; ++i) {
    std::int64_t gap = traj.ts[i + 1] - traj.ts[i];
    if (sel(rng) < 0.15) {
      // The gap leaving point i belongs to the segment occupied at point i,
      // matching how per-segment averages are accumulated.
      gap = perturb_gap(gap, avg.lookup(traj.segs[i]), rd(rng));
    }
    prev += gap;
    out.ts[i + 1] = prev;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

ad::Var mlm_loss(ad::Tape& t, ad::Var logits, const std::vector<int>& targets,
                 const std::vector<double>& weights) {
  const Eigen::Index m = t.value(logits).rows();
  const Eigen::Index v = t.value(logits).cols();
  if (m == 0) throw util::InputError("mlm_loss: no masked positions");
  if (static_cast<Eigen::Index>(targets.size()) != m ||
      static_cast<Eigen::Index>(weights.size()) != m) {
    throw util::InputError("mlm_loss: targets/weights must match logit rows");
  }
  Mat pick = Mat::Zero(m, v);
  for (Eigen::Index i = 0; i < m; ++i) {
    const int tgt = targets[static_cast<std::size_t>(i)];
    if (tgt < 0 || tgt >= v) {
      throw util::InputError("mlm_loss: target id " + std::to_string(tgt) +
                             " outside vocabulary of " + std::to_string(v));
    }
    pick(i, tgt) = -weights[static_cast<std::size_t>(i)];
  }
  return t.sum_all(t.cmul(t.log_softmax_rows(logits), t.constant(pick)));
}

ad::Var ntxent_loss(ad::Tape& t, ad::Var z, double tau) {
  const Eigen::Index rows = t.value(z).rows();
  if (rows == 0 || rows % 2 != 0) {
    throw util::InputError("ntxent_loss: need a nonempty even row count, got " +
                           std::to_string(rows));
  }
  const Eigen::Index half = rows / 2;

  // Cosine similarity: scale every row to unit length, then one Gram matrix.
  ad::Var sumsq = t.sum_rows(t.cmul(z, z));
  ad::Var inv_norm =
      t.cdiv(t.constant(Mat::Ones(rows, 1)), t.sqrt_(t.add_scalar(sumsq, 1e-12)));
  ad::Var zn = t.colwise_scale(z, inv_norm);
  ad::Var sim = t.scale(t.matmul(zn, t.transpose(zn)), 1.0 / tau);

  // An anchor never scores against itself: bury the diagonal before softmax.
  Mat self_mask = Mat::Zero(rows, rows);
  for (Eigen::Index i = 0; i < rows; ++i) self_mask(i, i) = -1e30;
  ad::Var logp = t.log_softmax_rows(t.add(sim, t.constant(self_mask)));

  Mat pick = Mat::Zero(rows, rows);
  const double w = -1.0 / static_cast<double>(rows);
  for (Eigen::Index i = 0; i < half; ++i) {
    pick(i, i + half) = w;
    pick(i + half, i) = w;
  }
  return t.sum_all(t.cmul(logp, t.constant(pick)));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

StepLosses pretrain_step(nn::ParamStore& store, nn::AdamW& opt, const model::ModelConfig& cfg,
                         const model::ModelInputs& in,
                         const std::vector<const geo::Trajectory*>& batch,
                         const PretrainConfig& pcfg, double lr, std::mt19937_64& rng) {
  if (batch.empty()) throw util::InputError("pretrain_step: empty batch");

  ad::Tape t;
  nn::Binder b(t, store);
  ad::Var toks = model::env_tokens(t, b, cfg, in);

  // Masked-prediction term.  Trajectories too short to mask sit this term
  // out but still feed the contrastive term below.
  std::vector<const geo::Trajectory*> eligible;
  for (const auto* traj : batch) {
    if (traj->size() >= 4) eligible.push_back(traj);
  }
  ad::Var mlm;
  if (eligible.empty()) {
    mlm = t.constant(Mat::Zero(1, 1));
  } else {
    std::vector<ad::Var> state_blocks;
    std::vector<int> targets;
    std::vector<double> weights;
    for (const auto* traj : eligible) {
      MaskPlan plan = span_mask(*traj, rng);
      enc::Encoded out =
          model::encode_trajectory(t, b, cfg, in, toks, *traj, &plan.masked, &rng);
      std::vector<Eigen::Index> rows;
      rows.reserve(plan.masked.size());
      const double w =
          1.0 / (static_cast<double>(eligible.size()) * static_cast<double>(plan.masked.size()));
      for (std::size_t pos : plan.masked) {
        rows.push_back(static_cast<Eigen::Index>(pos));
        targets.push_back(plan.targets.at(pos));
        weights.push_back(w);
      }
      state_blocks.push_back(t.row_gather(out.steps, rows));
    }
    ad::Var states = state_blocks.size() == 1 ? state_blocks[0] : t.concat_rows(state_blocks);
    ad::Var logits = t.matmul(states, t.transpose(b("pretrain.vocab_head")));
    mlm = mlm_loss(t, logits, targets, weights);
  }

  // Contrastive term over two augmented views of every trajectory.
  std::vector<ad::Var> za, zb;
  for (const auto* traj : batch) {
    geo::Trajectory view_a = crop_augment(*traj, rng);
    geo::Trajectory view_b = temporal_perturb(*traj, rng, in.avg_times);
    za.push_back(model::encode_trajectory(t, b, cfg, in, toks, view_a, nullptr, &rng).traj);
    zb.push_back(model::encode_trajectory(t, b, cfg, in, toks, view_b, nullptr, &rng).traj);
  }
  std::vector<ad::Var> all = za;
  all.insert(all.end(), zb.begin(), zb.end());
  ad::Var cl = ntxent_loss(t, t.concat_rows(all), pcfg.tau);

  ad::Var total = t.scale(t.add(mlm, cl), 0.5);

  StepLosses losses;
  losses.mlm = t.value(mlm)(0, 0);
  losses.cl = t.value(cl)(0, 0);
  losses.total = t.value(total)(0, 0);
  if (!std::isfinite(losses.total)) {
    std::ostringstream msg;
    msg << "pretraining diverged: non-finite loss (mlm=" << losses.mlm
        << ", cl=" << losses.cl << ", lr=" << lr << ", optimizer step " << opt.steps() << ")";
    throw util::RuntimeError(msg.str());
  }

  t.backward(total);
  std::map<std::size_t, Mat> grads;
  b.collect_grads(grads);
  opt.step(store, grads, lr);
  return losses;
}

StepLosses run_pretrain(nn::ParamStore& store, const model::ModelConfig& cfg,
                        const model::ModelInputs& in,
                        const std::vector<geo::Trajectory>& trajs,
                        const PretrainConfig& pcfg) {
  if (trajs.empty()) throw util::InputError("run_pretrain: no trajectories");
  if (pcfg.epochs < 1 || pcfg.batch_size < 1) {
    throw util::InputError("run_pretrain: epochs and batch_size must be positive");
  }

  const std::int64_t n = static_cast<std::int64_t>(trajs.size());
  const std::int64_t spe = (n + pcfg.batch_size - 1) / pcfg.batch_size;
  const std::int64_t total_steps = spe * pcfg.epochs;
  const std::int64_t warmup_steps = spe * pcfg.warmup_epochs;

  nn::AdamWConfig ocfg;
  ocfg.lr = pcfg.lr_peak;
  ocfg.weight_decay = pcfg.weight_decay;
  nn::AdamW opt(ocfg);
  // Resuming mid-run: keep the bias-correction clock aligned with the epoch
  // counter restored from the checkpoint.
  opt.set_steps(store.epoch * spe);

  std::ofstream log;
  if (!pcfg.log_path.empty()) {
    log.open(pcfg.log_path);
    if (!log) throw util::InputError("run_pretrain: cannot write log " + pcfg.log_path);
    log << "step,loss,mlm,cl,lr\n";
  }

  StepLosses last;
  for (std::int64_t epoch = store.epoch; epoch < pcfg.epochs; ++epoch) {
    std::vector<std::size_t> order(trajs.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(
        util::derive_seed(pcfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::int64_t i = 0; i < spe; ++i) {
      const std::int64_t step = epoch * spe + i;
      std::vector<const geo::Trajectory*> batch;
      for (std::int64_t j = i * pcfg.batch_size;
           j < std::min(n, (i + 1) * pcfg.batch_size); ++j) {
        batch.push_back(&trajs[order[static_cast<std::size_t>(j)]]);
      }
      std::mt19937_64 step_rng(
          util::derive_seed(pcfg.seed, "augment", static_cast<std::uint64_t>(step)));
      const double lr = nn::lr_at(step, warmup_steps, total_steps, pcfg.lr_peak, pcfg.lr_min);
      last = pretrain_step(store, opt, cfg, in, batch, pcfg, lr, step_rng);
      if (log.is_open()) {
        std::ostringstream line;
        line.precision(12);
        line << step << ',' << last.total << ',' << last.mlm << ',' << last.cl << ',' << lr;
        log << line.str() << '\n';
      }
    }

    store.epoch = epoch + 1;
    if (!pcfg.checkpoint_path.empty()) store.save(pcfg.checkpoint_path, true);
  }
  if (log.is_open()) log.flush();
  return last;
}

}  // namespace prtraj::pretrain
