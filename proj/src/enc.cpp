#include "prtraj/enc.hpp"

#include "prtraj/util.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace prtraj::enc {

using Mat = Eigen::MatrixXd;

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b, r = a % b;
  return r != 0 && ((r < 0) != (b < 0)) ? q - 1 : q;
}

ad::Var maybe_dropout(ad::Tape& t, ad::Var a, double p, std::mt19937_64* rng) {
  if (rng == nullptr || p <= 0.0) return a;
  const Mat& v = t.value(a);
  const double keep = 1.0 - p;
  Mat mask(v.rows(), v.cols());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (Eigen::Index j = 0; j < v.cols(); ++j)
      mask(i, j) = u(*rng) < keep ? 1.0 / keep : 0.0;
  return t.mask_mul(a, mask);
}

// Shared pass: x has one row per sequence slot (real then padding), the
// first n_real of which are real.
Encoded encode_core(ad::Tape& t, nn::Binder& b, const EncoderConfig& cfg, ad::Var x,
                    std::size_t n_real, std::mt19937_64* rng) {
  const int dh = cfg.head_dim();
  if (n_real == 0) throw util::InputError("encode: empty trajectory");
  const Eigen::Index rows = t.value(x).rows();
  if (static_cast<Eigen::Index>(n_real) > rows)
    throw util::InputError("encode: real length exceeds the buffer");
  if (t.value(x).cols() != cfg.d) throw util::InputError("encode: input width mismatch");

  ad::Var cls = t.add(b("enc.cls"), t.slice_rows(b("enc.pos"), 0, 1));
  ad::Var h = t.concat_rows({cls, x});
  const Eigen::Index m = rows + 1;
  const Eigen::Index valid = static_cast<Eigen::Index>(n_real) + 1;

  // Key mask: padding slots get a -1e30 score, so their softmax weight
  // underflows to exactly zero and real positions are untouched.
  const bool padded = valid < m;
  Mat key_mask(1, m);
  if (padded) {
    key_mask.setZero();
    for (Eigen::Index j = valid; j < m; ++j) key_mask(0, j) = -1e30;
  }

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "enc.l" + std::to_string(l) + ".";
    ad::Var a_in = t.layer_norm_rows(h, b(p + "ln1.gamma"), b(p + "ln1.beta"));
    ad::Var q = t.affine(a_in, b(p + "attn.Wq"), b(p + "attn.bq"));
    ad::Var k = t.affine(a_in, b(p + "attn.Wk"), b(p + "attn.bk"));
    ad::Var v = t.affine(a_in, b(p + "attn.Wv"), b(p + "attn.bv"));
    std::vector<ad::Var> heads;
    heads.reserve(static_cast<std::size_t>(cfg.heads));
    for (int hh = 0; hh < cfg.heads; ++hh) {
      ad::Var qh = t.slice_cols(q, hh * dh, dh);
      ad::Var kh = t.slice_cols(k, hh * dh, dh);
      ad::Var vh = t.slice_cols(v, hh * dh, dh);
      ad::Var scores =
          t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
      if (padded) scores = t.add_rowvec(scores, t.constant(key_mask));
      heads.push_back(t.matmul(t.softmax_rows(scores), vh));
    }
    ad::Var attn = t.affine(t.concat_cols(heads), b(p + "attn.Wo"), b(p + "attn.bo"));
    h = t.add(h, maybe_dropout(t, attn, cfg.dropout, rng));
    ad::Var f_in = t.layer_norm_rows(h, b(p + "ln2.gamma"), b(p + "ln2.beta"));
    ad::Var f = t.affine(t.gelu(t.affine(f_in, b(p + "ffn.W1"), b(p + "ffn.b1"))),
                         b(p + "ffn.W2"), b(p + "ffn.b2"));
    h = t.add(h, maybe_dropout(t, f, cfg.dropout, rng));
  }
  ad::Var out = t.layer_norm_rows(h, b("enc.final.gamma"), b("enc.final.beta"));
  return {t.slice_rows(out, 0, 1),
          t.slice_rows(out, 1, static_cast<Eigen::Index>(n_real))};
}

}  // namespace

int EncoderConfig::head_dim() const {
  if (heads <= 0 || d % heads != 0)
    throw util::InputError("encoder width must divide evenly across heads");
  return d / heads;
}

int minute_of_day(std::int64_t ts_utc, int tz_offset_minutes) {
  const std::int64_t local = ts_utc + 60LL * tz_offset_minutes;
  const std::int64_t minute = floor_div(local, 60);
  return static_cast<int>(minute - 1440 * floor_div(minute, 1440));
}

int day_of_week(std::int64_t ts_utc, int tz_offset_minutes) {
  const std::int64_t local = ts_utc + 60LL * tz_offset_minutes;
  const std::int64_t day = floor_div(local, 86400);
  // The epoch fell on a Thursday; shift so Monday comes out as 0.
  return static_cast<int>((day - 7 * floor_div(day, 7) + 3) % 7);
}

void register_encoder_params(nn::ParamStore& store, const EncoderConfig& cfg) {
  cfg.head_dim();
  store.create("enc.cls", 1, cfg.d);
  store.create("enc.pos", cfg.max_len + 1, cfg.d);
  store.create("enc.minute_table", 1440, cfg.d);
  store.create("enc.day_table", 7, cfg.d);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "enc.l" + std::to_string(l) + ".";
    store.create(p + "ln1.gamma", 1, cfg.d);
    store.create(p + "ln1.beta", 1, cfg.d);
    store.create(p + "attn.Wq", cfg.d, cfg.d);
    store.create(p + "attn.bq", 1, cfg.d);
    store.create(p + "attn.Wk", cfg.d, cfg.d);
    store.create(p + "attn.bk", 1, cfg.d);
    store.create(p + "attn.Wv", cfg.d, cfg.d);
    store.create(p + "attn.bv", 1, cfg.d);
    store.create(p + "attn.Wo", cfg.d, cfg.d);
    store.create(p + "attn.bo", 1, cfg.d);
    store.create(p + "ln2.gamma", 1, cfg.d);
    store.create(p + "ln2.beta", 1, cfg.d);
    store.create(p + "ffn.W1", 4 * cfg.d, cfg.d);
    store.create(p + "ffn.b1", 1, 4 * cfg.d);
    store.create(p + "ffn.W2", cfg.d, 4 * cfg.d);
    store.create(p + "ffn.b2", 1, cfg.d);
  }
  store.create("enc.final.gamma", 1, cfg.d);
  store.create("enc.final.beta", 1, cfg.d);
}

ad::Var point_embeddings(ad::Tape& t, nn::Binder& b, const EncoderConfig& cfg,
                         ad::Var choice_tokens, const std::vector<std::int64_t>& ts) {
  const Eigen::Index n = t.value(choice_tokens).rows();
  if (static_cast<Eigen::Index>(ts.size()) != n)
    throw util::InputError("point_embeddings: one timestamp per position expected");
  if (n > cfg.max_len)
    throw util::InputError("point_embeddings: trajectory longer than max_len");
  if (t.value(choice_tokens).cols() != cfg.d)
    throw util::InputError("point_embeddings: token width mismatch");
  std::vector<Eigen::Index> mn(static_cast<std::size_t>(n)), dy(mn.size()), pos(mn.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    mn[static_cast<std::size_t>(i)] = minute_of_day(ts[static_cast<std::size_t>(i)],
                                                    cfg.tz_offset_minutes);
    dy[static_cast<std::size_t>(i)] = day_of_week(ts[static_cast<std::size_t>(i)],
                                                  cfg.tz_offset_minutes);
    pos[static_cast<std::size_t>(i)] = i + 1;
  }
  return t.add_n({choice_tokens, t.row_gather(b("enc.minute_table"), mn),
                  t.row_gather(b("enc.day_table"), dy), t.row_gather(b("enc.pos"), pos)});
}

Encoded encode(ad::Tape& t, nn::Binder& b, const EncoderConfig& cfg, ad::Var x,
               std::mt19937_64* rng) {
  return encode_core(t, b, cfg, x, static_cast<std::size_t>(t.value(x).rows()), rng);
}

Encoded encode_padded(ad::Tape& t, nn::Binder& b, const EncoderConfig& cfg, ad::Var x_padded,
                      std::size_t n_real, std::mt19937_64* rng) {
  return encode_core(t, b, cfg, x_padded, n_real, rng);
}

void write_embeddings_text(const std::string& path, const std::vector<std::string>& ids,
                           const Eigen::MatrixXd& rows) {
  if (static_cast<Eigen::Index>(ids.size()) != rows.rows())
    throw util::InputError("embedding export: one id per row expected");
  std::ofstream out(path);
  if (!out) throw util::InputError("cannot open " + path + " for writing");
  out << std::setprecision(9);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    out << ids[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < rows.cols(); ++j) out << "," << rows(i, j);
    out << "\n";
  }
  if (!out) throw util::InputError("failed writing " + path);
}

void write_embeddings_binary(const std::string& path, const std::vector<std::int64_t>& ids,
                             const Eigen::MatrixXd& rows) {
  if (static_cast<Eigen::Index>(ids.size()) != rows.rows())
    throw util::InputError("embedding export: one id per row expected");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw util::InputError("cannot open " + path + " for writing");
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const std::int64_t id = ids[static_cast<std::size_t>(i)];
    out.write(reinterpret_cast<const char*>(&id), sizeof(id));
    for (Eigen::Index j = 0; j < rows.cols(); ++j) {
      const float f = static_cast<float>(rows(i, j));
      out.write(reinterpret_cast<const char*>(&f), sizeof(f));
    }
  }
  if (!out) throw util::InputError("failed writing " + path);
}

}  // namespace prtraj::enc
