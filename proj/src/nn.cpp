#include "prtraj/nn.hpp"

#include "prtraj/util.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace prtraj::nn {

namespace {
constexpr char kMagic[8] = {'P', 'R', 'T', 'C', 'K', 'P', 'T', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

// Row-major float64, native (little-endian) byte order.
void write_mat(std::ostream& out, const Mat& m, Eigen::Index rows, Eigen::Index cols) {
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      double v = (m.size() > 0) ? m(i, j) : 0.0;
      out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
}

Mat read_mat(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      double v;
      in.read(reinterpret_cast<char*>(&v), sizeof(v));
      m(i, j) = v;
    }
  return m;
}
}  // namespace

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Param& ParamStore::create(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (index_.count(name)) throw util::RuntimeError("duplicate parameter: " + name);
  index_[name] = params_.size();
  Param p;
  p.name = name;
  p.value = Mat::Zero(rows, cols);
  params_.push_back(std::move(p));
  return params_.back();
}

Param& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw util::RuntimeError("unknown parameter: " + name);
  return params_[it->second];
}

const Param& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw util::RuntimeError("unknown parameter: " + name);
  return params_[it->second];
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

std::size_t ParamStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw util::RuntimeError("unknown parameter: " + name);
  return it->second;
}

void ParamStore::save(const std::string& path, bool with_optimizer_state) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw util::RuntimeError("cannot write checkpoint: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_u64(out, static_cast<std::uint64_t>(epoch));
  char has_opt = with_optimizer_state ? 1 : 0;
  out.write(&has_opt, 1);
  write_u64(out, params_.size());
  for (const Param& p : params_) {
    std::uint32_t len = static_cast<std::uint32_t>(p.name.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(p.name.data(), len);
    write_u64(out, static_cast<std::uint64_t>(p.value.rows()));
    write_u64(out, static_cast<std::uint64_t>(p.value.cols()));
    write_mat(out, p.value, p.value.rows(), p.value.cols());
    if (with_optimizer_state) {
      write_mat(out, p.m, p.value.rows(), p.value.cols());
      write_mat(out, p.v, p.value.rows(), p.value.cols());
    }
  }
  if (!out) throw util::RuntimeError("checkpoint write failed: " + path);
}

void ParamStore::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw util::InputError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw util::InputError("not a checkpoint file: " + path);
  epoch = static_cast<std::int64_t>(read_u64(in));
  char has_opt = 0;
  in.read(&has_opt, 1);
  std::uint64_t count = read_u64(in);
  for (std::uint64_t k = 0; k < count; ++k) {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string name(len, '\0');
    in.read(name.data(), len);
    auto rows = static_cast<Eigen::Index>(read_u64(in));
    auto cols = static_cast<Eigen::Index>(read_u64(in));
    if (!in) throw util::InputError("truncated checkpoint: " + path);
    auto it = index_.find(name);
    if (it == index_.end())
      throw util::InputError("checkpoint tensor '" + name + "' unknown to this model");
    Param& p = params_[it->second];
    if (p.value.rows() != rows || p.value.cols() != cols)
      throw util::InputError("checkpoint tensor '" + name + "' has wrong shape");
    p.value = read_mat(in, rows, cols);
    if (has_opt) {
      p.m = read_mat(in, rows, cols);
      p.v = read_mat(in, rows, cols);
    }
  }
  if (!in) throw util::InputError("truncated checkpoint: " + path);
}

// ---------------------------------------------------------------------------
// Binder
// ---------------------------------------------------------------------------

ad::Var Binder::operator()(const std::string& name) {
  std::size_t idx = store_.index_of(name);
  auto cached = bound_.find(idx);
  if (cached != bound_.end()) return cached->second;
  const Param& p = store_.all()[idx];
  ad::Var v = p.trainable ? tape_.leaf(p.value) : tape_.constant(p.value);
  bound_[idx] = v;
  return v;
}

void Binder::collect_grads(std::map<std::size_t, Mat>& grads) const {
  for (const auto& [idx, var] : bound_) {
    if (!store_.all()[idx].trainable) continue;
    grads[idx] = tape_.grad(var);
  }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

void init_uniform(Mat& m, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = dist(rng);
}

void init_params(ParamStore& store, std::uint64_t base_seed) {
  for (Param& p : store.all()) {
    if (p.value.rows() == 1) {
      // Row vectors are biases and normalization offsets: zero, except
      // normalization gains, which start at identity.
      if (p.name.size() >= 6 && p.name.compare(p.name.size() - 6, 6, ".gamma") == 0)
        p.value.setOnes();
      else
        p.value.setZero();
      continue;
    }
    std::mt19937_64 rng(util::derive_seed(base_seed, p.name));
    init_uniform(p.value, 1.0 / std::sqrt(static_cast<double>(p.value.cols())), rng);
  }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

void AdamW::step(ParamStore& store, const std::map<std::size_t, Mat>& grads, double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [idx, g] : grads) {
    Param& p = store.all()[idx];
    if (!p.trainable) continue;
    if (p.m.size() == 0) {
      p.m = Mat::Zero(p.value.rows(), p.value.cols());
      p.v = Mat::Zero(p.value.rows(), p.value.cols());
    }
    p.m = cfg_.beta1 * p.m + (1.0 - cfg_.beta1) * g;
    p.v = (cfg_.beta2 * p.v.array() + (1.0 - cfg_.beta2) * g.array().square()).matrix();
    Mat mhat = p.m / bc1;
    Mat vhat = p.v / bc2;
    p.value.array() -=
        lr * (mhat.array() / (vhat.array().sqrt() + cfg_.eps) + cfg_.weight_decay * p.value.array());
  }
}

double lr_at(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps,
             double peak_lr, double min_lr) {
  if (warmup_steps > 0 && step < warmup_steps)
    return peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  std::int64_t span = total_steps - warmup_steps;
  if (span <= 0) return min_lr;
  double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
  if (progress > 1.0) progress = 1.0;
  return min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + std::cos(progress * M_PI));
}

}  // namespace prtraj::nn
