#include "prtraj/env.hpp"

#include <algorithm>
#include <cmath>

namespace prtraj::env {

using ad::Var;
using Mat = Eigen::MatrixXd;

int EnvConfig::head_dim() const {
  if (heads <= 0 || d % heads != 0)
    throw util::InputError("model width " + std::to_string(d) + " not divisible by " +
                           std::to_string(heads) + " heads");
  return d / heads;
}

int length_bucket(const EnvConfig& cfg, double length_m) {
  double lo = std::log(cfg.len_min), hi = std::log(cfg.len_max);
  double pos = (std::log(std::max(length_m, 1e-12)) - lo) / (hi - lo);
  int idx = static_cast<int>(std::floor(pos * cfg.len_buckets));
  return std::clamp(idx, 0, cfg.len_buckets - 1);
}

int type_row(const EnvConfig& cfg, int road_type) {
  if (road_type < 0 || road_type >= cfg.n_road_types) return cfg.n_road_types;
  return road_type;
}

int clip_degree(int degree) { return std::clamp(degree, 0, 8); }

void register_env_params(nn::ParamStore& store, const EnvConfig& cfg) {
  const int d = cfg.d;
  cfg.head_dim();  // validate early
  store.create("env.base.type_table", cfg.n_road_types + 1, d);
  store.create("env.base.length_table", cfg.len_buckets, d);
  store.create("env.base.indeg_table", 9, d);
  store.create("env.base.outdeg_table", 9, d);
  store.create("env.cross_gat.W_r", d, d);
  store.create("env.cross_gat.W_p", d, d);
  store.create("env.cross_gat.a", 1, d);
  for (int k = 0; k < 9; ++k) store.create("env.diffuse.W_" + std::to_string(k), d, d);
  store.create("env.coarse.e", cfg.n_categories, d);
  store.create("env.coarse.W_q", d, d);
  store.create("env.coarse.W_k", d, 2 * d);
  store.create("env.coarse.W_v", d, 2 * d);
  store.create("env.fuse.W_f", d, 2 * d);
  store.create("env.fuse.b_f", 1, d);
  store.create("env.fuse.W_c", d, 2 * d);
  store.create("env.fuse.b_c", 1, d);
}

std::vector<char> diffuse_indicator(const geo::GridIndex& gi, const std::vector<char>& valid) {
  std::vector<char> post(valid.size(), 0);
  for (int y = 0; y < gi.n_y; ++y)
    for (int x = 0; x < gi.n_x; ++x) {
      char any = 0;
      for (int b = -1; b <= 1 && !any; ++b)
        for (int a = -1; a <= 1 && !any; ++a) {
          int sx = x + a, sy = y + b;
          if (sx < 0 || sx >= gi.n_x || sy < 0 || sy >= gi.n_y) continue;
          any = valid[static_cast<std::size_t>(gi.flat(sx, sy))];
        }
      post[static_cast<std::size_t>(gi.flat(x, y))] = any;
    }
  return post;
}

std::vector<int> segment_cells(const geo::RoadNetwork& net, const geo::GridIndex& gi) {
  std::vector<int> cells(static_cast<std::size_t>(net.size()));
  for (int i = 0; i < net.size(); ++i) {
    geo::Vec2 m = geo::midpoint(net, i);
    auto [ix, iy] = geo::grid_cell(gi, m.x, m.y);
    cells[static_cast<std::size_t>(i)] = gi.flat(ix, iy);
  }
  return cells;
}

Var base_embeddings(ad::Tape& t, nn::Binder& b, const EnvConfig& cfg,
                    const geo::RoadNetwork& net) {
  std::vector<Eigen::Index> ty, le, in, out;
  for (const auto& s : net.segments) {
    ty.push_back(type_row(cfg, s.road_type));
    le.push_back(length_bucket(cfg, s.length));
    in.push_back(clip_degree(s.in_degree));
    out.push_back(clip_degree(s.out_degree));
  }
  return t.add_n({t.row_gather(b("env.base.type_table"), ty),
                  t.row_gather(b("env.base.length_table"), le),
                  t.row_gather(b("env.base.indeg_table"), in),
                  t.row_gather(b("env.base.outdeg_table"), out)});
}

Var cross_gat(ad::Tape& t, nn::Binder& b, const EnvConfig& cfg, const geo::RoadNetwork& net,
              Var p_fine, Var r) {
  const int dh = cfg.head_dim();
  const int n = net.size();

  // Flattened attention edges (i attends to j) over the undirected adjacency.
  std::vector<Eigen::Index> ei, ej;
  std::vector<std::vector<Eigen::Index>> groups(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j : net.adjacent[static_cast<std::size_t>(i)]) {
      groups[static_cast<std::size_t>(i)].push_back(static_cast<Eigen::Index>(ei.size()));
      ei.push_back(i);
      ej.push_back(j);
    }

  Var q = t.matmul(r, t.transpose(b("env.cross_gat.W_r")));       // |V| x d
  Var p = t.matmul(p_fine, t.transpose(b("env.cross_gat.W_p")));  // |V| x d
  if (ei.empty()) return p;  // no neighborhoods anywhere

  Var sum = t.add(t.row_gather(q, ei), t.row_gather(p, ej));  // E x d
  Var act = t.leaky_relu(sum, 0.2);
  Var a = b("env.cross_gat.a");

  std::vector<Var> heads;
  for (int h = 0; h < cfg.heads; ++h) {
    Var scores = t.matmul(t.slice_cols(act, h * dh, dh),
                          t.transpose(t.slice_cols(a, h * dh, dh)));  // E x 1
    Var alpha = ad::grouped_softmax(t, scores, groups);
    Var weighted = t.colwise_scale(t.slice_cols(t.row_gather(p, ej), h * dh, dh), alpha);
    heads.push_back(t.row_scatter(weighted, ei, n));  // |V| x dh
  }
  return t.add(p, t.concat_cols(heads));
}

Var diffuse_grid(ad::Tape& t, nn::Binder& b, const EnvConfig& cfg, const geo::GridIndex& gi,
                 const Mat& grid) {
  if (grid.rows() != gi.cell_count() || grid.cols() != cfg.d)
    throw util::InputError("diffuse_grid: grid must be cell_count x d");
  std::vector<Var> terms;
  for (int a = -1; a <= 1; ++a)
    for (int bb = -1; bb <= 1; ++bb) {
      int k = (a + 1) * 3 + (bb + 1);
      Mat shifted = Mat::Zero(grid.rows(), grid.cols());
      for (int y = 0; y < gi.n_y; ++y)
        for (int x = 0; x < gi.n_x; ++x) {
          int sx = x + a, sy = y + bb;
          if (sx < 0 || sx >= gi.n_x || sy < 0 || sy >= gi.n_y) continue;
          shifted.row(gi.flat(x, y)) = grid.row(gi.flat(sx, sy));
        }
      terms.push_back(t.matmul(t.constant(shifted),
                               t.transpose(b("env.diffuse.W_" + std::to_string(k)))));
    }
  return t.add_n(terms);
}

Var coarse_attention(ad::Tape& t, nn::Binder& b, const EnvConfig& cfg, Var r,
                     const std::vector<Var>& diffused,
                     const std::vector<std::vector<char>>& post_valid,
                     const std::vector<int>& seg_cell) {
  const int dh = cfg.head_dim();
  const int n = static_cast<int>(seg_cell.size());
  if (static_cast<int>(diffused.size()) != cfg.n_categories ||
      static_cast<int>(post_valid.size()) != cfg.n_categories)
    throw util::InputError("coarse_attention: one grid and indicator per category");

  // One attended row per (segment, valid category at its cell), grouped by
  // category so each category's keys/values are built in a single gather.
  std::vector<Eigen::Index> pair_seg;
  std::vector<std::vector<Eigen::Index>> groups(static_cast<std::size_t>(n));
  std::vector<Var> u_parts;
  Var e_table = b("env.coarse.e");
  for (int c = 0; c < cfg.n_categories; ++c) {
    std::vector<Eigen::Index> cells, erows;
    for (int i = 0; i < n; ++i) {
      if (!post_valid[static_cast<std::size_t>(c)][static_cast<std::size_t>(seg_cell[i])])
        continue;
      groups[static_cast<std::size_t>(i)].push_back(
          static_cast<Eigen::Index>(pair_seg.size()));
      pair_seg.push_back(i);
      cells.push_back(seg_cell[static_cast<std::size_t>(i)]);
      erows.push_back(c);
    }
    if (cells.empty()) continue;
    u_parts.push_back(t.concat_cols({t.row_gather(diffused[static_cast<std::size_t>(c)], cells),
                                     t.row_gather(e_table, erows)}));
  }
  if (pair_seg.empty()) return t.constant(Mat::Zero(n, cfg.d));

  Var u = t.concat_rows(u_parts);                                // E x 2d
  Var q = t.matmul(r, t.transpose(b("env.coarse.W_q")));         // |V| x d
  Var k = t.matmul(u, t.transpose(b("env.coarse.W_k")));         // E x d
  Var v = t.matmul(u, t.transpose(b("env.coarse.W_v")));         // E x d
  Var q_pairs = t.row_gather(q, pair_seg);

  std::vector<Var> heads;
  for (int h = 0; h < cfg.heads; ++h) {
    // Dot product as written: no 1/sqrt(d) scaling.
    Var scores = t.sum_rows(t.cmul(t.slice_cols(q_pairs, h * dh, dh),
                                   t.slice_cols(k, h * dh, dh)));  // E x 1
    Var alpha = ad::grouped_softmax(t, scores, groups);
    Var weighted = t.colwise_scale(t.slice_cols(v, h * dh, dh), alpha);
    heads.push_back(t.row_scatter(weighted, pair_seg, n));
  }
  return t.concat_cols(heads);
}

Var fuse(ad::Tape& t, nn::Binder& b, const EnvConfig& cfg, Var r, Var p_fine_t,
         Var p_coarse_t) {
  (void)cfg;
  Var gf = t.tanh_(t.affine(t.concat_cols({p_fine_t, r}), b("env.fuse.W_f"), b("env.fuse.b_f")));
  Var gc =
      t.tanh_(t.affine(t.concat_cols({p_coarse_t, r}), b("env.fuse.W_c"), b("env.fuse.b_c")));
  return t.add_n({r, t.cmul(p_fine_t, gf), t.cmul(p_coarse_t, gc)});
}

Var env_forward(ad::Tape& t, nn::Binder& b, const EnvConfig& cfg, const geo::RoadNetwork& net,
                const Mat& p_fine, const CoarseField& field) {
  if (p_fine.rows() != net.size() || p_fine.cols() != cfg.d)
    throw util::InputError("env_forward: p_fine must be |V| x d");
  if (static_cast<int>(field.grids.size()) != cfg.n_categories ||
      static_cast<int>(field.valid.size()) != cfg.n_categories)
    throw util::InputError("env_forward: one coarse grid and indicator per category");

  Var r = base_embeddings(t, b, cfg, net);
  Var pf = cross_gat(t, b, cfg, net, t.constant(p_fine), r);

  std::vector<Var> diffused;
  std::vector<std::vector<char>> post;
  for (int c = 0; c < cfg.n_categories; ++c) {
    diffused.push_back(diffuse_grid(t, b, cfg, field.gi, field.grids[static_cast<std::size_t>(c)]));
    post.push_back(diffuse_indicator(field.gi, field.valid[static_cast<std::size_t>(c)]));
  }
  Var pc = coarse_attention(t, b, cfg, r, diffused, post, segment_cells(net, field.gi));
  return fuse(t, b, cfg, r, pf, pc);
}

}  // namespace prtraj::env
