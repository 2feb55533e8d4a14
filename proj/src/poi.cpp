#include "prtraj/poi.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

namespace prtraj::poi {

int FinePoiContext::count(int c1) const {
  auto it = grouped.find(c1);
  if (it == grouped.end()) return 0;
  int n = 0;
  for (const auto& [c2, names] : it->second) n += static_cast<int>(names.size());
  return n;
}

int FinePoiContext::total() const {
  int n = 0;
  for (const auto& [c1, subs] : grouped) n += count(c1);
  return n;
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

CategoryRegistry load_registry(const std::string& path) {
  CategoryRegistry reg;
  auto lines = util::read_lines(path);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (util::trim(lines[i]).empty()) continue;
    auto f = util::split_limit(lines[i], ',', 2);
    std::string at = path + ":" + std::to_string(i + 1);
    if (f.size() != 2) throw util::InputError(at + ": expected c1,c2");
    std::string c1 = util::trim(f[0]), c2 = util::trim(f[1]);
    if (c1.empty() || c2.empty()) throw util::InputError(at + ": empty category name");
    auto [it, inserted] =
        reg.primary_by_name.try_emplace(c1, static_cast<int>(reg.primary_names.size()));
    if (inserted) reg.primary_names.push_back(c1);
    if (reg.sub_by_name.count(c2)) {
      if (reg.sub_primary[static_cast<std::size_t>(reg.sub_by_name[c2])] != it->second)
        throw util::InputError(at + ": subcategory '" + c2 + "' listed under two primaries");
      continue;
    }
    reg.sub_by_name[c2] = static_cast<int>(reg.sub_names.size());
    reg.sub_names.push_back(c2);
    reg.sub_primary.push_back(it->second);
  }
  if (reg.primary_names.empty()) throw util::InputError("empty category registry: " + path);
  return reg;
}

std::vector<Poi> load_pois(const std::string& path, const CategoryRegistry& reg) {
  std::vector<Poi> pois;
  auto lines = util::read_lines(path);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (util::trim(lines[i]).empty()) continue;
    auto f = util::split_limit(lines[i], ',', 5);
    std::string at = path + ":" + std::to_string(i + 1);
    if (f.size() != 5) throw util::InputError(at + ": expected 5 fields");
    Poi p;
    p.lat = util::parse_double(f[0], at + " lat");
    p.lon = util::parse_double(f[1], at + " lon");
    auto c1 = reg.primary_by_name.find(util::trim(f[2]));
    if (c1 == reg.primary_by_name.end())
      throw util::InputError(at + ": unknown primary category '" + f[2] + "'");
    auto c2 = reg.sub_by_name.find(util::trim(f[3]));
    if (c2 == reg.sub_by_name.end())
      throw util::InputError(at + ": unknown subcategory '" + f[3] + "'");
    p.c1 = c1->second;
    p.c2 = c2->second;
    if (reg.sub_primary[static_cast<std::size_t>(p.c2)] != p.c1)
      throw util::InputError(at + ": subcategory '" + f[3] + "' does not belong to '" + f[2] +
                             "'");
    p.name = f[4];
    pois.push_back(std::move(p));
  }
  return pois;
}

// ---------------------------------------------------------------------------
// Proximity and clustering
// ---------------------------------------------------------------------------

FinePoiContext pois_within(const geo::RoadNetwork& net, const std::vector<Poi>& pois, int seg_id,
                           double delta) {
  if (delta <= 0.0) throw util::InputError("delta must be positive");
  const geo::RoadSegment& s = net.segments.at(static_cast<std::size_t>(seg_id));
  geo::Vec2 a = geo::project(s.start_lat, s.start_lon, net.ref_lat);
  geo::Vec2 b = geo::project(s.end_lat, s.end_lon, net.ref_lat);
  FinePoiContext ctx;
  ctx.segment_id = seg_id;
  for (const Poi& p : pois) {
    geo::Vec2 q = geo::project(p.lat, p.lon, net.ref_lat);
    if (geo::point_to_chord(q, a, b) <= delta) ctx.grouped[p.c1][p.c2].push_back(p.name);
  }
  for (auto& [c1, subs] : ctx.grouped)
    for (auto& [c2, names] : subs) std::sort(names.begin(), names.end());
  return ctx;
}

std::vector<FinePoiContext> build_fine_contexts(const geo::RoadNetwork& net,
                                                const std::vector<Poi>& pois, double delta) {
  if (delta <= 0.0) throw util::InputError("delta must be positive");
  std::vector<geo::Vec2> pts;
  pts.reserve(pois.size());
  for (const Poi& p : pois) pts.push_back(geo::project(p.lat, p.lon, net.ref_lat));
  std::vector<FinePoiContext> out(static_cast<std::size_t>(net.size()));
  for (int sid = 0; sid < net.size(); ++sid) {
    const geo::RoadSegment& s = net.segments[static_cast<std::size_t>(sid)];
    geo::Vec2 a = geo::project(s.start_lat, s.start_lon, net.ref_lat);
    geo::Vec2 b = geo::project(s.end_lat, s.end_lon, net.ref_lat);
    FinePoiContext& ctx = out[static_cast<std::size_t>(sid)];
    ctx.segment_id = sid;
    for (std::size_t k = 0; k < pois.size(); ++k)
      if (geo::point_to_chord(pts[k], a, b) <= delta)
        ctx.grouped[pois[k].c1][pois[k].c2].push_back(pois[k].name);
    for (auto& [c1, subs] : ctx.grouped)
      for (auto& [c2, names] : subs) std::sort(names.begin(), names.end());
  }
  return out;
}

std::vector<CoarseCluster> select_cluster_cells(const std::vector<Poi>& pois,
                                                const geo::RoadNetwork& net,
                                                const geo::GridIndex& gi, int c1) {
  struct CellAgg {
    int count = 0;
    std::map<int, std::vector<std::string>> grouped;
  };
  std::map<std::pair<int, int>, CellAgg> cells;
  for (const Poi& p : pois) {
    if (p.c1 != c1) continue;
    geo::Vec2 q = geo::project(p.lat, p.lon, net.ref_lat);
    auto [ix, iy] = geo::grid_cell(gi, q.x, q.y);
    CellAgg& agg = cells[{ix, iy}];
    ++agg.count;
    agg.grouped[p.c2].push_back(p.name);
  }
  if (cells.empty()) return {};

  std::vector<std::pair<std::pair<int, int>, CellAgg*>> ranked;
  ranked.reserve(cells.size());
  for (auto& [cell, agg] : cells) ranked.push_back({cell, &agg});
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second->count != b.second->count) return a.second->count > b.second->count;
    return a.first < b.first;
  });
  auto keep = static_cast<std::size_t>(
      std::ceil(0.10 * static_cast<double>(ranked.size())));

  std::vector<CoarseCluster> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    CoarseCluster c;
    c.ix = ranked[i].first.first;
    c.iy = ranked[i].first.second;
    c.c1 = c1;
    c.poi_count = ranked[i].second->count;
    c.grouped = std::move(ranked[i].second->grouped);
    for (auto& [c2, names] : c.grouped) std::sort(names.begin(), names.end());
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

namespace {
std::string fmt_num(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

std::string join_names(const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) out += ", ";
    out += names[i];
  }
  return out;
}
}  // namespace

std::string build_fine_prompt(const std::string& city, double delta, const FinePoiContext& ctx,
                              const CategoryRegistry& reg) {
  std::string d = fmt_num(delta);
  std::string out = "You are a resident living in " + city +
                    ", familiar with the local transportation network and surrounding POI "
                    "information.\n";
  std::string closing =
      "Please describe the relevant characteristics of this road section based on the POI "
      "information within a " +
      d + "-meter radius around it.";
  if (ctx.empty()) return out + "\n" + closing;

  out += "\nThere is a road segment with the following POIs located within a " + d +
         "-meter radius:\n";
  for (const auto& [c1, subs] : ctx.grouped) {
    out += "\n" + std::to_string(ctx.count(c1)) + " POIs categorized under [" +
           reg.primary_names.at(static_cast<std::size_t>(c1)) + "], further subdivided as:\n";
    for (const auto& [c2, names] : subs)
      out += "- " + std::to_string(names.size()) + " [" +
             reg.sub_names.at(static_cast<std::size_t>(c2)) + "]: " + join_names(names) + ".\n";
  }
  return out + "\n" + closing;
}

std::string build_coarse_prompt(const std::string& city, double cell_size,
                                const CoarseCluster& cluster, const CategoryRegistry& reg) {
  std::string L = fmt_num(cell_size);
  const std::string& cat = reg.primary_names.at(static_cast<std::size_t>(cluster.c1));
  std::string out = "You are a resident living in " + city +
                    ", familiar with the local transportation network and surrounding POI "
                    "information.\n";
  out += "\nIn a " + L + "m × " + L + "m area of " + city + ", POIs of the type [" + cat +
         "] exhibit significant clustering characteristics. Data analysis shows that the number "
         "of [" +
         cat + "] POIs in this area ranks within the top 10% in " + city +
         ". Further subdividing these [" + cat + "] POIs, they include:\n\n";
  for (const auto& [c2, names] : cluster.grouped) {
    out += "- " + std::to_string(names.size()) + " [" +
           reg.sub_names.at(static_cast<std::size_t>(c2)) + "]: ";
    if (names.size() > 3) {
      out += names[0] + ", " + names[1] + ", " + names[2] + ", etc.\n";
    } else {
      out += join_names(names) + ".\n";
    }
  }
  out += "\nPlease describe the characteristics of this " + L + "m × " + L +
         "m area where a large number of [" + cat + "] POIs are clustered.";
  return out;
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

namespace {

Eigen::VectorXd normalize_or_throw(Eigen::VectorXd v, const std::string& hash) {
  if (!v.allFinite()) throw util::RuntimeError("non-finite embedding for text " + hash);
  double n = v.norm();
  if (n == 0.0) {
    v.setZero();
    v(0) = 1.0;
    return v;
  }
  return v / n;
}

class MockProvider final : public EmbedProvider {
 public:
  explicit MockProvider(int d) : d_(d) {
    if (d <= 0) throw util::InputError("embedding dimension must be positive");
  }

  Eigen::VectorXd embed(const std::string& text) override {
    if (text.empty()) throw util::InputError("cannot embed empty text");
    std::string hash = util::sha256_hex(text);
    std::mt19937_64 rng(util::derive_seed(util::fnv1a64(hash), "mock-embed"));
    std::normal_distribution<double> dist(0.0, 1.0);
    Eigen::VectorXd v(d_);
    for (int i = 0; i < d_; ++i) v(i) = dist(rng);
    return normalize_or_throw(std::move(v), hash);
  }

  int dim() const override { return d_; }

 private:
  int d_;
};

class RemoteProvider final : public EmbedProvider {
 public:
  RemoteProvider(int d, std::string endpoint, std::string model, int max_retries)
      : d_(d), model_(std::move(model)), retries_(max_retries) {
    auto slash = endpoint.find('/', endpoint.find("//") == std::string::npos
                                          ? 0
                                          : endpoint.find("//") + 2);
    if (slash == std::string::npos) {
      base_ = endpoint;
      path_ = "/";
    } else {
      base_ = endpoint.substr(0, slash);
      path_ = endpoint.substr(slash);
    }
  }

  Eigen::VectorXd embed(const std::string& text) override {
    if (text.empty()) throw util::InputError("cannot embed empty text");
    std::string hash = util::sha256_hex(text);
    nlohmann::json req{{"model", model_}, {"input", text}};
    std::string err;
    for (int attempt = 0; attempt <= retries_; ++attempt) {
      if (attempt > 0)
        std::this_thread::sleep_for(std::chrono::milliseconds(250 << (attempt - 1)));
      httplib::Client cli(base_);
      cli.set_read_timeout(30, 0);
      auto res = cli.Post(path_, req.dump(), "application/json");
      if (!res) {
        err = "connection failed";
        continue;
      }
      if (res->status != 200) {
        err = "status " + std::to_string(res->status);
        continue;
      }
      try {
        auto body = nlohmann::json::parse(res->body);
        const auto& emb = body.at("embedding");
        if (static_cast<int>(emb.size()) != d_)
          throw util::RuntimeError("provider returned dimension " +
                                   std::to_string(emb.size()) + ", expected " +
                                   std::to_string(d_) + " (text " + hash + ")");
        Eigen::VectorXd v(d_);
        for (int i = 0; i < d_; ++i) v(i) = emb[static_cast<std::size_t>(i)].get<double>();
        return normalize_or_throw(std::move(v), hash);
      } catch (const nlohmann::json::exception& e) {
        err = std::string("bad response: ") + e.what();
      }
    }
    throw util::RuntimeError("embedding provider failed after retries (" + err + ") for text " +
                             hash);
  }

  int dim() const override { return d_; }

 private:
  int d_;
  std::string base_, path_, model_;
  int retries_;
};

class CachedProvider final : public EmbedProvider {
 public:
  CachedProvider(std::unique_ptr<EmbedProvider> inner, std::string dir)
      : inner_(std::move(inner)), dir_(std::move(dir)) {
    util::ensure_dir(dir_);
  }

  Eigen::VectorXd embed(const std::string& text) override {
    if (text.empty()) throw util::InputError("cannot embed empty text");
    std::string path = dir_ + "/" + util::sha256_hex(text) + ".vec";
    {
      std::lock_guard<std::mutex> lock(mu_);
      std::ifstream in(path, std::ios::binary);
      if (in) {
        Eigen::VectorXd v(inner_->dim());
        std::vector<float> buf(static_cast<std::size_t>(inner_->dim()));
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (in)
          for (int i = 0; i < inner_->dim(); ++i) v(i) = buf[static_cast<std::size_t>(i)];
        if (in) return v;
      }
    }
    Eigen::VectorXd v = inner_->embed(text);
    std::lock_guard<std::mutex> lock(mu_);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw util::RuntimeError("cannot write embedding cache entry: " + path);
    for (int i = 0; i < v.size(); ++i) {
      float f = static_cast<float>(v(i));
      out.write(reinterpret_cast<const char*>(&f), sizeof(f));
    }
    return v;
  }

  int dim() const override { return inner_->dim(); }

 private:
  std::unique_ptr<EmbedProvider> inner_;
  std::string dir_;
  std::mutex mu_;
};

}  // namespace

std::unique_ptr<EmbedProvider> make_mock_provider(int d) {
  return std::make_unique<MockProvider>(d);
}

std::unique_ptr<EmbedProvider> make_remote_provider(int d, const std::string& endpoint,
                                                    const std::string& model, int max_retries) {
  return std::make_unique<RemoteProvider>(d, endpoint, model, max_retries);
}

std::unique_ptr<EmbedProvider> make_cached_provider(std::unique_ptr<EmbedProvider> inner,
                                                    const std::string& cache_dir) {
  return std::make_unique<CachedProvider>(std::move(inner), cache_dir);
}

}  // namespace prtraj::poi
