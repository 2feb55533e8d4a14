#include "prtraj/pipeline.hpp"

#include "prtraj/util.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

namespace prtraj::pipeline {

using Mat = Eigen::MatrixXd;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

namespace {

int to_int(const std::string& v, const std::string& key) {
  return static_cast<int>(util::parse_int(v, "config key '" + key + "'"));
}

double to_double(const std::string& v, const std::string& key) {
  return util::parse_double(v, "config key '" + key + "'");
}

bool to_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw util::InputError("config key '" + key + "': expected 0/1/true/false, got '" + v + "'");
}

void validate_config(const RunConfig& cfg) {
  auto positive = [](double v, const char* name) {
    if (!(v > 0)) throw util::InputError(std::string("config: ") + name + " must be positive");
  };
  positive(cfg.d, "d");
  positive(cfg.heads, "heads");
  positive(cfg.layers, "layers");
  positive(cfg.batch, "batch");
  positive(cfg.epochs, "epochs");
  positive(cfg.lr, "lr");
  positive(cfg.min_lr, "min_lr");
  positive(cfg.tau, "tau");
  positive(cfg.delta, "delta");
  positive(cfg.cell_size, "cell_size");
  positive(cfg.max_len, "max_len");
  positive(cfg.len_min, "len_min");
  if (cfg.warmup_epochs < 0) throw util::InputError("config: warmup_epochs must not be negative");
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0)
    throw util::InputError("config: dropout must lie in [0, 1)");
  if (cfg.d % cfg.heads != 0)
    throw util::InputError("config: d must be divisible by heads");
  if (cfg.len_max <= cfg.len_min)
    throw util::InputError("config: len_max must exceed len_min");
  if (cfg.provider != "mock" && cfg.provider != "remote")
    throw util::InputError("config: provider must be mock or remote");
}

}  // namespace

RunConfig parse_run_config(const std::string& path) {
  RunConfig cfg;
  cfg.source_path = path;
  const std::string text = util::read_file(path);
  cfg.source_sha256 = util::sha256_hex(text);

  auto lines = util::split(text, '\n');
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string line = lines[i];
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = util::trim(line);
    if (line.empty()) continue;
    const std::string at = path + ":" + std::to_string(i + 1);
    auto eq = line.find('=');
    if (eq == std::string::npos) throw util::InputError(at + ": expected key = value");
    const std::string key = util::trim(line.substr(0, eq));
    const std::string val = util::trim(line.substr(eq + 1));
    if (key.empty()) throw util::InputError(at + ": empty key");

    if (key == "d") cfg.d = to_int(val, key);
    else if (key == "heads") cfg.heads = to_int(val, key);
    else if (key == "layers") cfg.layers = to_int(val, key);
    else if (key == "dropout") cfg.dropout = to_double(val, key);
    else if (key == "delta") cfg.delta = to_double(val, key);
    else if (key == "cell_size") cfg.cell_size = to_double(val, key);
    else if (key == "n_road_types") cfg.n_road_types = to_int(val, key);
    else if (key == "len_buckets") cfg.len_buckets = to_int(val, key);
    else if (key == "len_min") cfg.len_min = to_double(val, key);
    else if (key == "len_max") cfg.len_max = to_double(val, key);
    else if (key == "max_len") cfg.max_len = to_int(val, key);
    else if (key == "tz_offset_minutes") cfg.tz_offset_minutes = to_int(val, key);
    else if (key == "use_route_choice") cfg.use_route_choice = to_bool(val, key);
    else if (key == "batch") cfg.batch = to_int(val, key);
    else if (key == "lr") cfg.lr = to_double(val, key);
    else if (key == "min_lr") cfg.min_lr = to_double(val, key);
    else if (key == "warmup_epochs") cfg.warmup_epochs = to_int(val, key);
    else if (key == "epochs") cfg.epochs = to_int(val, key);
    else if (key == "tau") cfg.tau = to_double(val, key);
    else if (key == "weight_decay") cfg.weight_decay = to_double(val, key);
    else if (key == "seed")
      cfg.seed = static_cast<std::uint64_t>(util::parse_int(val, "config key 'seed'"));
    else if (key == "str_queries") cfg.str_queries = to_int(val, key);
    else if (key == "str_negatives") cfg.str_negatives = to_int(val, key);
    else if (key == "ksp_cap") cfg.ksp_cap = to_int(val, key);
    else if (key == "pr_k") cfg.pr_k = to_int(val, key);
    else if (key == "pr_delta") cfg.pr_delta = to_double(val, key);
    else if (key == "city") cfg.city = val;
    else if (key == "provider") cfg.provider = val;
    else if (key == "remote_endpoint") cfg.remote_endpoint = val;
    else if (key == "remote_model") cfg.remote_model = val;
    else if (key == "network") cfg.network = val;
    else if (key == "edges") cfg.edges = val;
    else if (key == "registry") cfg.registry = val;
    else if (key == "pois") cfg.pois = val;
    else if (key == "trajectories") cfg.trajectories = val;
    else if (key == "cache_dir") cfg.cache_dir = val;
    else if (key == "checkpoint_dir") cfg.checkpoint_dir = val;
    else if (key == "synth_m") cfg.synth.m = to_int(val, key);
    else if (key == "synth_seg_len_min") cfg.synth.seg_len_min = to_double(val, key);
    else if (key == "synth_seg_len_max") cfg.synth.seg_len_max = to_double(val, key);
    else if (key == "synth_categories") cfg.synth.n_categories = to_int(val, key);
    else if (key == "synth_subs") cfg.synth.subs_per_category = to_int(val, key);
    else if (key == "synth_pois_per_category") cfg.synth.pois_per_category = to_int(val, key);
    else if (key == "synth_trajs") cfg.synth.n_trajs = to_int(val, key);
    else if (key == "synth_traj_len_min") cfg.synth.traj_len_min = to_int(val, key);
    else if (key == "synth_traj_len_max") cfg.synth.traj_len_max = to_int(val, key);
    else if (key == "synth_turn_bias") cfg.synth.turn_bias = to_double(val, key);
    else if (key == "synth_t0")
      cfg.synth.t0 = util::parse_int(val, "config key 'synth_t0'");
    else throw util::InputError(at + ": unknown config key '" + key + "'");
  }
  validate_config(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// Dataset splitting
// ---------------------------------------------------------------------------

Splits split_chronological(std::vector<geo::Trajectory> trajs) {
  if (trajs.size() < 10)
    throw util::InputError("chronological split needs at least 10 trajectories, got " +
                           std::to_string(trajs.size()));
  for (const auto& t : trajs)
    if (t.ts.empty()) throw util::InputError("chronological split: trajectory without timestamps");
  std::stable_sort(trajs.begin(), trajs.end(), [](const auto& a, const auto& b) {
    return a.ts.front() < b.ts.front();
  });
  const std::size_t n = trajs.size();
  const std::size_t n_train = n * 70 / 100;
  const std::size_t n_val = n * 10 / 100;
  Splits s;
  s.train.assign(trajs.begin(), trajs.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(trajs.begin() + static_cast<std::ptrdiff_t>(n_train),
               trajs.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(trajs.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), trajs.end());
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic city
// ---------------------------------------------------------------------------

namespace {

const char* kPrimaryPool[] = {"Food",    "Shopping", "Education", "Medical",
                              "Leisure", "Finance",  "Transport", "Hotel"};

std::string primary_name(int c) {
  if (c < 8) return kPrimaryPool[c];
  return "Category " + std::to_string(c + 1);
}

std::string sub_name(int c, int k) {
  std::string s = primary_name(c) + " Type ";
  if (k < 26) s += static_cast<char>('A' + k);
  else s += std::to_string(k + 1);
  return s;
}

}  // namespace

SyntheticCity generate_synthetic_city(const SyntheticCitySpec& spec, std::mt19937_64& rng) {
  if (spec.m < 3) throw util::InputError("synthetic city: grid must be at least 3x3");
  if (spec.seg_len_min <= 0 || spec.seg_len_max < spec.seg_len_min)
    throw util::InputError("synthetic city: bad segment length range");
  if (spec.n_categories < 1 || spec.subs_per_category < 1 || spec.pois_per_category < 1)
    throw util::InputError("synthetic city: POI counts must be positive");
  if (spec.n_trajs < 1 || spec.traj_len_min < 2 || spec.traj_len_max < spec.traj_len_min)
    throw util::InputError("synthetic city: bad trajectory counts");
  if (spec.turn_bias < 0.0 || spec.turn_bias > 1.0)
    throw util::InputError("synthetic city: turn_bias must lie in [0, 1]");

  const int m = spec.m;
  const double pi = 3.14159265358979323846;
  const double lat0 = 39.90, lon0 = 116.40;
  const double mlat = 111320.0;  // meters per degree of latitude
  const double mlon = mlat * std::cos(lat0 * pi / 180.0);

  std::uniform_real_distribution<double> len_u(spec.seg_len_min, spec.seg_len_max);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  std::vector<double> row_gap(static_cast<std::size_t>(m - 1)), col_gap(row_gap.size());
  for (auto& g : row_gap) g = len_u(rng);
  for (auto& g : col_gap) g = len_u(rng);
  std::vector<double> node_lat(static_cast<std::size_t>(m), lat0);
  std::vector<double> node_lon(static_cast<std::size_t>(m), lon0);
  for (int i = 1; i < m; ++i)
    node_lat[static_cast<std::size_t>(i)] =
        node_lat[static_cast<std::size_t>(i - 1)] + row_gap[static_cast<std::size_t>(i - 1)] / mlat;
  for (int j = 1; j < m; ++j)
    node_lon[static_cast<std::size_t>(j)] =
        node_lon[static_cast<std::size_t>(j - 1)] + col_gap[static_cast<std::size_t>(j - 1)] / mlon;

  // One road class per whole street; lanes derive from the class so lane
  // labels are predictable from the attributes the model actually sees.
  std::vector<int> row_type(static_cast<std::size_t>(m)), col_type(static_cast<std::size_t>(m));
  for (auto& t : row_type) t = static_cast<int>(rng() % 4);
  for (auto& t : col_type) t = static_cast<int>(rng() % 4);

  struct Seg {
    int ai, aj, bi, bj;  // grid coordinates of the endpoints
    double len;
    int type;
  };
  std::vector<Seg> segs;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j + 1 < m; ++j) {
      const double len = col_gap[static_cast<std::size_t>(j)];
      segs.push_back({i, j, i, j + 1, len, row_type[static_cast<std::size_t>(i)]});
      segs.push_back({i, j + 1, i, j, len, row_type[static_cast<std::size_t>(i)]});
    }
  }
  for (int i = 0; i + 1 < m; ++i) {
    for (int j = 0; j < m; ++j) {
      const double len = row_gap[static_cast<std::size_t>(i)];
      segs.push_back({i, j, i + 1, j, len, col_type[static_cast<std::size_t>(j)]});
      segs.push_back({i + 1, j, i, j, len, col_type[static_cast<std::size_t>(j)]});
    }
  }

  // seg -> segments leaving its end node, U-turn excluded.
  std::map<std::pair<int, int>, std::vector<int>> starts;
  for (std::size_t s = 0; s < segs.size(); ++s)
    starts[{segs[s].ai, segs[s].aj}].push_back(static_cast<int>(s));
  std::vector<std::vector<int>> next(segs.size());
  for (std::size_t s = 0; s < segs.size(); ++s) {
    for (int t : starts[{segs[s].bi, segs[s].bj}]) {
      const Seg& cand = segs[static_cast<std::size_t>(t)];
      if (cand.bi == segs[s].ai && cand.bj == segs[s].aj) continue;
      next[s].push_back(t);
    }
  }

  SyntheticCity city;
  std::ostringstream net_os, edge_os, reg_os, poi_os, traj_os;
  net_os << std::setprecision(12);
  poi_os << std::setprecision(12);

  net_os << "id,start_lat,start_lon,end_lat,end_lon,length,road_type,lanes\n";
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const Seg& sg = segs[s];
    net_os << s << ',' << node_lat[static_cast<std::size_t>(sg.ai)] << ','
           << node_lon[static_cast<std::size_t>(sg.aj)] << ','
           << node_lat[static_cast<std::size_t>(sg.bi)] << ','
           << node_lon[static_cast<std::size_t>(sg.bj)] << ',' << sg.len << ',' << sg.type
           << ',' << 4 - sg.type << '\n';
  }

  edge_os << "from_id,to_id\n";
  for (std::size_t s = 0; s < segs.size(); ++s)
    for (int t : next[s]) edge_os << s << ',' << t << '\n';

  reg_os << "c1,c2\n";
  for (int c = 0; c < spec.n_categories; ++c)
    for (int k = 0; k < spec.subs_per_category; ++k)
      reg_os << primary_name(c) << ',' << sub_name(c, k) << '\n';

  // POIs: 70% cluster around a per-category hotspot so the top-density cut
  // is nontrivial; the rest scatter uniformly.
  const double lat_min = node_lat.front(), lat_max = node_lat.back();
  const double lon_min = node_lon.front(), lon_max = node_lon.back();
  const double mean_gap =
      (std::accumulate(row_gap.begin(), row_gap.end(), 0.0) +
       std::accumulate(col_gap.begin(), col_gap.end(), 0.0)) /
      static_cast<double>(row_gap.size() + col_gap.size());
  poi_os << "lat,lon,primary_category,subcategory,name\n";
  for (int c = 0; c < spec.n_categories; ++c) {
    const double hlat = node_lat[rng() % static_cast<std::uint64_t>(m)];
    const double hlon = node_lon[rng() % static_cast<std::uint64_t>(m)];
    std::normal_distribution<double> glat(0.0, 1.5 * mean_gap / mlat);
    std::normal_distribution<double> glon(0.0, 1.5 * mean_gap / mlon);
    std::uniform_real_distribution<double> ulat(lat_min, lat_max), ulon(lon_min, lon_max);
    for (int k = 0; k < spec.pois_per_category; ++k) {
      double lat, lon;
      if (rng() % 10 < 7) {
        lat = std::clamp(hlat + glat(rng), lat_min, lat_max);
        lon = std::clamp(hlon + glon(rng), lon_min, lon_max);
      } else {
        lat = ulat(rng);
        lon = ulon(rng);
      }
      const int sub = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.subs_per_category));
      poi_os << lat << ',' << lon << ',' << primary_name(c) << ',' << sub_name(c, sub) << ','
             << sub_name(c, sub) << " #" << k + 1 << '\n';
    }
  }

  // Biased random walks; departures increase with the trajectory index so
  // the chronological split has a stable order.
  const double speed[4] = {13.9, 11.1, 8.3, 5.6};  // m/s per road class
  for (int k = 0; k < spec.n_trajs; ++k) {
    const int len = spec.traj_len_min +
                    static_cast<int>(rng() % static_cast<std::uint64_t>(
                                               spec.traj_len_max - spec.traj_len_min + 1));
    int cur = static_cast<int>(rng() % segs.size());
    std::int64_t ts = spec.t0 + 240 * static_cast<std::int64_t>(k) +
                      static_cast<std::int64_t>(rng() % 120);
    for (int step = 0; step < len; ++step) {
      if (step > 0) traj_os << ' ';
      traj_os << cur << ':' << ts;
      const Seg& sg = segs[static_cast<std::size_t>(cur)];
      ts += std::max<std::int64_t>(
          1, std::llround(sg.len / speed[sg.type] * (0.85 + 0.3 * u01(rng))));
      if (step + 1 == len) break;
      const auto& cands = next[static_cast<std::size_t>(cur)];
      int straight = -1;
      for (int t : cands) {
        const Seg& cs = segs[static_cast<std::size_t>(t)];
        if (cs.bi - cs.ai == sg.bi - sg.ai && cs.bj - cs.aj == sg.bj - sg.aj) straight = t;
      }
      if (straight >= 0 && u01(rng) < spec.turn_bias) {
        cur = straight;
      } else {
        cur = cands[rng() % cands.size()];
      }
    }
    traj_os << '\n';
  }

  city.network_csv = net_os.str();
  city.edges_csv = edge_os.str();
  city.registry_csv = reg_os.str();
  city.poi_csv = poi_os.str();
  city.traj_txt = traj_os.str();
  return city;
}

// ---------------------------------------------------------------------------
// Artifact I/O
// ---------------------------------------------------------------------------

void save_matrix(const Mat& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw util::InputError("cannot write matrix file: " + path);
  out.write("PRTMAT", 6);
  const std::int64_t rows = m.rows(), cols = m.cols();
  out.write(reinterpret_cast<const char*>(&rows), sizeof rows);
  out.write(reinterpret_cast<const char*>(&cols), sizeof cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
  if (!out) throw util::RuntimeError("short write: " + path);
}

Mat load_matrix(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw util::InputError("cannot read matrix file: " + path);
  char magic[6];
  in.read(magic, 6);
  if (!in || std::string_view(magic, 6) != "PRTMAT")
    throw util::InputError("not a matrix file: " + path);
  std::int64_t rows = 0, cols = 0;
  in.read(reinterpret_cast<char*>(&rows), sizeof rows);
  in.read(reinterpret_cast<char*>(&cols), sizeof cols);
  if (!in || rows < 0 || cols < 0 || rows > (1 << 26) || cols > (1 << 26))
    throw util::InputError("corrupt matrix header: " + path);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      double v = 0;
      in.read(reinterpret_cast<char*>(&v), sizeof v);
      m(i, j) = v;
    }
  if (!in) throw util::InputError("truncated matrix file: " + path);
  return m;
}

// ---------------------------------------------------------------------------
// Run plumbing
// ---------------------------------------------------------------------------

namespace {

// Exclusive ownership of an output directory for the duration of a command.
class DirLock {
 public:
  explicit DirLock(const std::string& dir) : path_(dir + "/.lock") {
    util::ensure_dir(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr)
      throw util::RuntimeError("output directory is locked by another run (remove " + path_ +
                               " if that run is dead)");
    std::fputs("locked\n", f);
    std::fclose(f);
  }
  ~DirLock() { std::remove(path_.c_str()); }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
};

void require_path(const std::string& value, const char* key) {
  if (value.empty())
    throw util::InputError(std::string("config key '") + key + "' is required for this command");
}

void ensure_parent_dir(const std::string& file) {
  auto parent = std::filesystem::path(file).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

void write_manifest(const RunConfig& cfg, const std::string& command,
                    const std::vector<std::string>& inputs) {
  json j;
  j["config_sha256"] = cfg.source_sha256;
  j["seed"] = cfg.seed;
  json in = json::object();
  for (const auto& p : inputs) in[p] = util::sha256_file_hex(p);
  j["inputs"] = in;
  j["versions"] = {{"artifact", "1.0.0"},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                 std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"config_format", 1}};
  util::ensure_dir(cfg.cache_dir);
  util::write_file(cfg.cache_dir + "/manifest_" + command + ".json", j.dump(2) + "\n");
}

void require_data_paths(const RunConfig& cfg) {
  require_path(cfg.network, "network");
  require_path(cfg.edges, "edges");
  require_path(cfg.registry, "registry");
  require_path(cfg.pois, "pois");
  require_path(cfg.cache_dir, "cache_dir");
}

std::unique_ptr<poi::EmbedProvider> make_provider(const RunConfig& cfg) {
  std::unique_ptr<poi::EmbedProvider> inner;
  if (cfg.provider == "remote") {
    require_path(cfg.remote_endpoint, "remote_endpoint");
    require_path(cfg.remote_model, "remote_model");
    inner = poi::make_remote_provider(cfg.d, cfg.remote_endpoint, cfg.remote_model);
  } else {
    inner = poi::make_mock_provider(cfg.d);
  }
  return poi::make_cached_provider(std::move(inner), cfg.cache_dir + "/embed");
}

std::vector<std::string> coarse_paths(const RunConfig& cfg, int n_categories) {
  std::vector<std::string> out;
  for (int c = 0; c < n_categories; ++c)
    out.push_back(cfg.cache_dir + "/coarse_" + std::to_string(c) + ".mat");
  return out;
}

}  // namespace

std::unique_ptr<LoadedWorld> load_world(const RunConfig& cfg) {
  require_data_paths(cfg);
  auto w = std::make_unique<LoadedWorld>();
  w->net = geo::load_network(cfg.network, cfg.edges);
  w->registry = poi::load_registry(cfg.registry);

  w->mcfg.env.d = cfg.d;
  w->mcfg.env.heads = cfg.heads;
  w->mcfg.env.n_road_types = cfg.n_road_types;
  w->mcfg.env.n_categories = w->registry.primary_count();
  w->mcfg.env.len_buckets = cfg.len_buckets;
  w->mcfg.env.len_min = cfg.len_min;
  w->mcfg.env.len_max = cfg.len_max;
  w->mcfg.enc.d = cfg.d;
  w->mcfg.enc.layers = cfg.layers;
  w->mcfg.enc.heads = cfg.heads;
  w->mcfg.enc.dropout = cfg.dropout;
  w->mcfg.enc.max_len = cfg.max_len;
  w->mcfg.enc.tz_offset_minutes = cfg.tz_offset_minutes;
  w->mcfg.use_route_choice = cfg.use_route_choice;

  const std::string train_path = cfg.cache_dir + "/train.txt";
  if (!util::file_exists(train_path))
    throw util::InputError("missing " + train_path + "; run `ingest` first");
  w->train = geo::load_trajectories(train_path, w->net,
                                    static_cast<std::size_t>(cfg.max_len));
  w->val = geo::load_trajectories(cfg.cache_dir + "/val.txt", w->net,
                                  static_cast<std::size_t>(cfg.max_len));
  w->test = geo::load_trajectories(cfg.cache_dir + "/test.txt", w->net,
                                   static_cast<std::size_t>(cfg.max_len));

  w->in.net = &w->net;
  w->in.stats = route::load_transition_stats(cfg.cache_dir + "/transitions.csv", w->net);
  w->in.avg_times = model::build_avg_times(w->train);

  const std::string fine_path = cfg.cache_dir + "/p_fine.mat";
  if (!util::file_exists(fine_path))
    throw util::InputError("missing " + fine_path + "; run `describe` first");
  w->in.p_fine = load_matrix(fine_path);
  if (w->in.p_fine.rows() != w->net.size() || w->in.p_fine.cols() != cfg.d)
    throw util::InputError("p_fine shape does not match the network and d; re-run `describe`");

  w->in.field.gi = geo::make_grid(w->net, cfg.cell_size);
  auto valid_lines = util::read_lines(cfg.cache_dir + "/coarse_valid.txt");
  const int n_cat = w->registry.primary_count();
  if (static_cast<int>(valid_lines.size()) < n_cat)
    throw util::InputError("coarse_valid.txt does not cover every category; re-run `describe`");
  for (int c = 0; c < n_cat; ++c) {
    const std::string& bits = valid_lines[static_cast<std::size_t>(c)];
    if (static_cast<int>(bits.size()) != w->in.field.gi.cell_count())
      throw util::InputError("coarse_valid.txt does not match the grid; re-run `describe`");
    std::vector<char> valid(bits.size(), 0);
    for (std::size_t i = 0; i < bits.size(); ++i) valid[i] = bits[i] == '1';
    Mat g = load_matrix(cfg.cache_dir + "/coarse_" + std::to_string(c) + ".mat");
    if (g.rows() != w->in.field.gi.cell_count() || g.cols() != cfg.d)
      throw util::InputError("coarse grid shape mismatch; re-run `describe`");
    w->in.field.valid.push_back(std::move(valid));
    w->in.field.grids.push_back(std::move(g));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void cmd_synth(const RunConfig& cfg) {
  require_path(cfg.network, "network");
  require_path(cfg.edges, "edges");
  require_path(cfg.registry, "registry");
  require_path(cfg.pois, "pois");
  require_path(cfg.trajectories, "trajectories");
  require_path(cfg.cache_dir, "cache_dir");
  DirLock lock(cfg.cache_dir);

  std::mt19937_64 rng(util::derive_seed(cfg.seed, "synth"));
  SyntheticCity city = generate_synthetic_city(cfg.synth, rng);
  const std::array<std::pair<const std::string*, const std::string*>, 5> outs = {{
      {&cfg.network, &city.network_csv},
      {&cfg.edges, &city.edges_csv},
      {&cfg.registry, &city.registry_csv},
      {&cfg.pois, &city.poi_csv},
      {&cfg.trajectories, &city.traj_txt},
  }};
  for (const auto& [path, content] : outs) {
    ensure_parent_dir(*path);
    util::write_file(*path, *content);
  }
  write_manifest(cfg, "synth", {});
}

void cmd_ingest(const RunConfig& cfg) {
  require_data_paths(cfg);
  require_path(cfg.trajectories, "trajectories");
  DirLock lock(cfg.cache_dir);

  auto net = geo::load_network(cfg.network, cfg.edges);
  auto reg = poi::load_registry(cfg.registry);
  auto pois = poi::load_pois(cfg.pois, reg);
  auto trajs =
      geo::load_trajectories(cfg.trajectories, net, static_cast<std::size_t>(cfg.max_len));
  auto splits = split_chronological(std::move(trajs));
  geo::save_trajectories(splits.train, cfg.cache_dir + "/train.txt");
  geo::save_trajectories(splits.val, cfg.cache_dir + "/val.txt");
  geo::save_trajectories(splits.test, cfg.cache_dir + "/test.txt");

  auto stats = route::build_transition_stats(splits.train);
  route::save_transition_stats(stats, cfg.cache_dir + "/transitions.csv");

  // Index the per-segment POI neighborhoods so `describe` scales are
  // inspectable before any provider work happens.
  auto contexts = poi::build_fine_contexts(net, pois, cfg.delta);
  std::ostringstream counts;
  counts << "segment_id,poi_count\n";
  for (int s = 0; s < net.size(); ++s)
    counts << s << ',' << contexts[static_cast<std::size_t>(s)].total() << '\n';
  util::write_file(cfg.cache_dir + "/fine_counts.csv", counts.str());

  write_manifest(cfg, "ingest",
                 {cfg.network, cfg.edges, cfg.registry, cfg.pois, cfg.trajectories});
}

void cmd_describe(const RunConfig& cfg) {
  require_data_paths(cfg);
  DirLock lock(cfg.cache_dir);

  auto net = geo::load_network(cfg.network, cfg.edges);
  auto reg = poi::load_registry(cfg.registry);
  auto pois = poi::load_pois(cfg.pois, reg);
  auto provider = make_provider(cfg);
  const std::string prompt_dir = cfg.cache_dir + "/prompts";
  util::ensure_dir(prompt_dir);

  auto contexts = poi::build_fine_contexts(net, pois, cfg.delta);
  Mat p_fine(net.size(), cfg.d);
  for (int s = 0; s < net.size(); ++s) {
    const std::string text =
        poi::build_fine_prompt(cfg.city, cfg.delta, contexts[static_cast<std::size_t>(s)], reg);
    util::write_file(prompt_dir + "/fine_" + std::to_string(s) + ".txt", text);
    p_fine.row(s) = provider->embed(text).transpose();
  }
  save_matrix(p_fine, cfg.cache_dir + "/p_fine.mat");

  auto gi = geo::make_grid(net, cfg.cell_size);
  std::ostringstream valid_os;
  for (int c = 0; c < reg.primary_count(); ++c) {
    Mat g = Mat::Zero(gi.cell_count(), cfg.d);
    std::string bits(static_cast<std::size_t>(gi.cell_count()), '0');
    for (const auto& cluster : poi::select_cluster_cells(pois, net, gi, c)) {
      const std::string text = poi::build_coarse_prompt(cfg.city, cfg.cell_size, cluster, reg);
      util::write_file(prompt_dir + "/coarse_" + std::to_string(c) + "_" +
                           std::to_string(cluster.ix) + "_" + std::to_string(cluster.iy) +
                           ".txt",
                       text);
      const int cell = gi.flat(cluster.ix, cluster.iy);
      g.row(cell) = provider->embed(text).transpose();
      bits[static_cast<std::size_t>(cell)] = '1';
    }
    save_matrix(g, cfg.cache_dir + "/coarse_" + std::to_string(c) + ".mat");
    valid_os << bits << '\n';
  }
  util::write_file(cfg.cache_dir + "/coarse_valid.txt", valid_os.str());

  write_manifest(cfg, "describe", {cfg.network, cfg.edges, cfg.registry, cfg.pois});
}

namespace {

std::vector<std::string> model_input_paths(const RunConfig& cfg, int n_categories) {
  std::vector<std::string> inputs = {cfg.network,
                                     cfg.edges,
                                     cfg.cache_dir + "/train.txt",
                                     cfg.cache_dir + "/val.txt",
                                     cfg.cache_dir + "/test.txt",
                                     cfg.cache_dir + "/transitions.csv",
                                     cfg.cache_dir + "/p_fine.mat",
                                     cfg.cache_dir + "/coarse_valid.txt"};
  for (const auto& p : coarse_paths(cfg, n_categories)) inputs.push_back(p);
  return inputs;
}

void reset_optimizer_state(nn::ParamStore& store) {
  for (auto& p : store.all()) {
    p.m.setZero();
    p.v.setZero();
  }
  store.epoch = 0;
}

downstream::FinetuneConfig finetune_config(const RunConfig& cfg, const std::string& task) {
  downstream::FinetuneConfig fcfg;
  fcfg.epochs = cfg.epochs;
  fcfg.batch_size = cfg.batch;
  fcfg.warmup_epochs = cfg.warmup_epochs;
  fcfg.lr_peak = cfg.lr;
  fcfg.lr_min = cfg.min_lr;
  fcfg.weight_decay = cfg.weight_decay;
  fcfg.seed = cfg.seed;
  fcfg.log_path = cfg.cache_dir + "/finetune_" + task + "_log.csv";
  return fcfg;
}

}  // namespace

void cmd_pretrain(const RunConfig& cfg) {
  require_path(cfg.checkpoint_dir, "checkpoint_dir");
  auto w = load_world(cfg);
  DirLock lock(cfg.cache_dir);
  util::ensure_dir(cfg.checkpoint_dir);

  nn::ParamStore store;
  model::register_model_params(store, w->mcfg, w->net.size());
  const std::string ckpt = cfg.checkpoint_dir + "/pretrain.ckpt";
  if (util::file_exists(ckpt)) {
    store.load(ckpt);  // resume an interrupted run
  } else {
    model::init_model_params(store, cfg.seed);
  }

  pretrain::PretrainConfig pcfg;
  pcfg.epochs = cfg.epochs;
  pcfg.batch_size = cfg.batch;
  pcfg.warmup_epochs = cfg.warmup_epochs;
  pcfg.lr_peak = cfg.lr;
  pcfg.lr_min = cfg.min_lr;
  pcfg.weight_decay = cfg.weight_decay;
  pcfg.tau = cfg.tau;
  pcfg.seed = cfg.seed;
  pcfg.log_path = cfg.cache_dir + "/pretrain_log.csv";
  pcfg.checkpoint_path = ckpt;
  pretrain::run_pretrain(store, w->mcfg, w->in, w->train, pcfg);

  write_manifest(cfg, "pretrain", model_input_paths(cfg, w->registry.primary_count()));
}

void cmd_finetune(const RunConfig& cfg, const std::string& task) {
  if (task != "rlp" && task != "tdp" && task != "tte" && task != "pr")
    throw util::InputError("finetune: unknown task '" + task + "'");
  require_path(cfg.checkpoint_dir, "checkpoint_dir");
  auto w = load_world(cfg);
  DirLock lock(cfg.cache_dir);
  util::ensure_dir(cfg.checkpoint_dir);

  nn::ParamStore store;
  model::register_model_params(store, w->mcfg, w->net.size());
  const std::string pre_ckpt = cfg.checkpoint_dir + "/pretrain.ckpt";
  if (util::file_exists(pre_ckpt)) {
    store.load(pre_ckpt);
    reset_optimizer_state(store);  // fresh optimizer for the new objective
  } else {
    model::init_model_params(store, cfg.seed);  // from-scratch baseline
  }

  auto fcfg = finetune_config(cfg, task);
  if (task == "rlp") {
    downstream::finetune_rlp(store, w->mcfg, w->in, downstream::rlp_dataset(w->net), fcfg);
  } else if (task == "tdp") {
    downstream::finetune_tdp(store, w->mcfg, w->in, w->train, fcfg);
  } else if (task == "tte") {
    downstream::finetune_tte(store, w->mcfg, w->in, w->train, fcfg);
  } else {
    auto insts = downstream::build_pr_instances(w->train, w->net, w->in.avg_times, cfg.pr_k,
                                                cfg.pr_delta);
    downstream::finetune_pr(store, w->mcfg, w->in, insts, fcfg);
  }
  store.save(cfg.checkpoint_dir + "/finetune_" + task + ".ckpt");
  write_manifest(cfg, "finetune_" + task,
                 model_input_paths(cfg, w->registry.primary_count()));
}

std::string cmd_eval(const RunConfig& cfg, const std::string& task) {
  if (task != "rlp" && task != "tdp" && task != "tte" && task != "str" && task != "pr")
    throw util::InputError("eval: unknown task '" + task + "'");
  require_path(cfg.checkpoint_dir, "checkpoint_dir");
  auto w = load_world(cfg);
  DirLock lock(cfg.cache_dir);

  nn::ParamStore store;
  model::register_model_params(store, w->mcfg, w->net.size());

  json out;
  if (task == "str") {
    store.load(cfg.checkpoint_dir + "/pretrain.ckpt");
    std::mt19937_64 rng(util::derive_seed(cfg.seed, "str-benchmark"));
    auto bench = downstream::build_str_benchmark(
        w->test, w->net, w->in.avg_times, static_cast<std::size_t>(cfg.str_queries),
        static_cast<std::size_t>(cfg.str_negatives), rng, cfg.ksp_cap);
    std::vector<geo::Trajectory> cands = bench.originals;
    cands.insert(cands.end(), bench.distractors.begin(), bench.distractors.end());
    Mat zq = downstream::embed_trajectories(store, w->mcfg, w->in, bench.queries);
    Mat zc = downstream::embed_trajectories(store, w->mcfg, w->in, cands);
    auto m = downstream::str_evaluate(zq, zc);
    out = {{"HR@1", m.hr1}, {"HR@5", m.hr5}, {"MRR", m.mrr}};
  } else if (task == "rlp") {
    downstream::register_head_params(store, cfg.d, 4, "head.rlp");
    store.load(cfg.checkpoint_dir + "/finetune_rlp.ckpt");
    auto data = downstream::rlp_dataset(w->net);
    auto preds = downstream::predict_rlp(store, w->mcfg, w->in, data.segs);
    auto f1 = downstream::metric_f1(preds, data.labels);
    out = {{"MacroF1", f1.macro}, {"MicroF1", f1.micro}};
  } else if (task == "tdp") {
    downstream::register_head_params(store, cfg.d, w->net.size(), "head.tdp");
    store.load(cfg.checkpoint_dir + "/finetune_tdp.ckpt");
    Mat scores = downstream::predict_tdp(store, w->mcfg, w->in, w->test);
    std::vector<int> labels;
    for (const auto& t : w->test) labels.push_back(t.segs.back());
    out = {{"Acc@1", downstream::metric_acc_at_k(scores, labels, 1)},
           {"Acc@5", downstream::metric_acc_at_k(scores, labels, 5)}};
  } else if (task == "tte") {
    downstream::register_head_params(store, cfg.d, 1, "head.tte");
    store.load(cfg.checkpoint_dir + "/finetune_tte.ckpt");
    auto preds = downstream::predict_tte(store, w->mcfg, w->in, w->test);
    std::vector<double> labels;
    for (const auto& t : w->test) labels.push_back(downstream::tte_label_minutes(t));
    auto m = downstream::metric_regression(preds, labels);
    out = {{"MAE", m.mae}, {"RMSE", m.rmse}, {"MAPE", m.mape}};
  } else {
    downstream::register_head_params(store, cfg.d, 1, "head.pr");
    store.load(cfg.checkpoint_dir + "/finetune_pr.ckpt");
    auto insts = downstream::build_pr_instances(w->test, w->net, w->in.avg_times, cfg.pr_k,
                                                cfg.pr_delta);
    double tau_sum = 0.0, rho_sum = 0.0;
    int used = 0;
    for (const auto& inst : insts) {
      if (inst.cands.size() < 2) continue;
      auto preds = downstream::predict_pr(store, w->mcfg, w->in, inst.cands);
      try {
        const double rho = downstream::spearman_rho(preds, inst.scores);
        tau_sum += downstream::kendall_tau(preds, inst.scores);
        rho_sum += rho;
        ++used;
      } catch (const util::InputError&) {
        continue;  // all candidate scores identical: correlation undefined
      }
    }
    if (used == 0)
      throw util::InputError("path ranking evaluation: no instance with two rankable candidates");
    out = {{"KendallTau", tau_sum / used},
           {"SpearmanRho", rho_sum / used},
           {"instances", used}};
  }

  const std::string text = out.dump(2) + "\n";
  util::write_file(cfg.cache_dir + "/metrics_" + task + ".json", text);
  write_manifest(cfg, "eval_" + task, model_input_paths(cfg, w->registry.primary_count()));
  return text;
}

void cmd_embed(const RunConfig& cfg) {
  require_path(cfg.trajectories, "trajectories");
  require_path(cfg.checkpoint_dir, "checkpoint_dir");
  auto w = load_world(cfg);
  DirLock lock(cfg.cache_dir);

  nn::ParamStore store;
  model::register_model_params(store, w->mcfg, w->net.size());
  store.load(cfg.checkpoint_dir + "/pretrain.ckpt");

  auto trajs =
      geo::load_trajectories(cfg.trajectories, w->net, static_cast<std::size_t>(cfg.max_len));
  Mat z = downstream::embed_trajectories(store, w->mcfg, w->in, trajs);
  std::ostringstream os;
  os << std::setprecision(17);
  os << "id";
  for (int j = 0; j < cfg.d; ++j) os << ",v" << j;
  os << '\n';
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    os << i;
    for (Eigen::Index j = 0; j < z.cols(); ++j) os << ',' << z(i, j);
    os << '\n';
  }
  util::write_file(cfg.cache_dir + "/embeddings.csv", os.str());
  write_manifest(cfg, "embed", model_input_paths(cfg, w->registry.primary_count()));
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

int cli_run(int argc, const char* const* argv) {
  CLI::App app{"prtraj: trajectory representation learning pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed_override = 0;
  std::string device = "cpu";
  app.add_option("--config", config_path, "run configuration file")->required();
  app.add_option("--seed", seed_override, "override the configured seed");
  app.add_option("--device", device, "compute device (only cpu is implemented)");

  std::string ft_task, ev_task;
  auto* synth = app.add_subcommand("synth", "generate a synthetic city dataset");
  auto* ingest = app.add_subcommand("ingest", "validate inputs and build indices");
  auto* describe = app.add_subcommand("describe", "emit prompts and fill the embedding cache");
  auto* pretr = app.add_subcommand("pretrain", "run self-supervised pretraining");
  auto* finet = app.add_subcommand("finetune", "fine-tune a task head");
  // Global flags may follow the subcommand (`prtraj synth --config ...`).
  for (auto* sub : {synth, ingest, describe, pretr, finet}) sub->fallthrough();
  finet->add_option("--task", ft_task, "task to fine-tune")
      ->required()
      ->check(CLI::IsMember({"rlp", "tdp", "tte", "pr"}));
  auto* eval = app.add_subcommand("eval", "evaluate a task and print metrics");
  eval->add_option("--task", ev_task, "task to evaluate")
      ->required()
      ->check(CLI::IsMember({"rlp", "tdp", "tte", "str", "pr"}));
  auto* embed = app.add_subcommand("embed", "write trajectory embeddings to csv");
  eval->fallthrough();
  embed->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // bad usage is an input error, help is not
  }

  try {
    RunConfig cfg = parse_run_config(config_path);
    if (app.count("--seed") > 0) cfg.seed = seed_override;
    if (device != "cpu")
      util::log_warn("device '" + device + "' is not available, running on cpu");
    if (synth->parsed()) cmd_synth(cfg);
    else if (ingest->parsed()) cmd_ingest(cfg);
    else if (describe->parsed()) cmd_describe(cfg);
    else if (pretr->parsed()) cmd_pretrain(cfg);
    else if (finet->parsed()) cmd_finetune(cfg, ft_task);
    else if (eval->parsed()) std::fputs(cmd_eval(cfg, ev_task).c_str(), stdout);
    else if (embed->parsed()) cmd_embed(cfg);
    return 0;
  } catch (const util::InputError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return 2;
  }
}

}  // namespace prtraj::pipeline
