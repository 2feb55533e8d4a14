// POI ingestion, proximity extraction, cluster selection, prompt
// construction, and pluggable text embedding.

#pragma once

#include "prtraj/geo.hpp"

#include <Eigen/Dense>

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace prtraj::poi {

struct CategoryRegistry {
  std::vector<std::string> primary_names;          // index = c1 id
  std::vector<std::string> sub_names;              // index = c2 id
  std::vector<int> sub_primary;                    // c2 id -> owning c1 id
  std::map<std::string, int> primary_by_name;
  std::map<std::string, int> sub_by_name;

  int primary_count() const { return static_cast<int>(primary_names.size()); }
  int sub_count() const { return static_cast<int>(sub_names.size()); }
};

struct Poi {
  double lat = 0, lon = 0;
  int c1 = -1;
  int c2 = -1;
  std::string name;
};

// POIs near one road segment, grouped c1 -> c2 -> lexicographic names.
struct FinePoiContext {
  int segment_id = -1;
  std::map<int, std::map<int, std::vector<std::string>>> grouped;

  bool empty() const { return grouped.empty(); }
  int count(int c1) const;
  int total() const;
};

// One top-density cell for one primary category.
struct CoarseCluster {
  int ix = 0, iy = 0;
  int c1 = -1;
  int poi_count = 0;
  std::map<int, std::vector<std::string>> grouped;  // c2 -> lexicographic names
};

// registry CSV: c1,c2 (one subcategory per line; ids by first appearance)
CategoryRegistry load_registry(const std::string& path);
// POI CSV: lat,lon,primary_category,subcategory,name (name may contain commas)
std::vector<Poi> load_pois(const std::string& path, const CategoryRegistry& reg);

// Chord distance from the POI to the segment's projected endpoints <= delta.
FinePoiContext pois_within(const geo::RoadNetwork& net, const std::vector<Poi>& pois, int seg_id,
                           double delta);
std::vector<FinePoiContext> build_fine_contexts(const geo::RoadNetwork& net,
                                                const std::vector<Poi>& pois, double delta);

// Cells holding >=1 category-c POI, ranked by count descending (ties by
// (ix, iy) ascending); the top ceil(10%) are returned.
std::vector<CoarseCluster> select_cluster_cells(const std::vector<Poi>& pois,
                                                const geo::RoadNetwork& net,
                                                const geo::GridIndex& gi, int c1);

std::string build_fine_prompt(const std::string& city, double delta, const FinePoiContext& ctx,
                              const CategoryRegistry& reg);
std::string build_coarse_prompt(const std::string& city, double cell_size,
                                const CoarseCluster& cluster, const CategoryRegistry& reg);

// ---------------------------------------------------------------------------
// Text embedding
// ---------------------------------------------------------------------------

class EmbedProvider {
 public:
  virtual ~EmbedProvider() = default;
  // Unit-L2 vector of the provider's dimension; InputError on empty text.
  virtual Eigen::VectorXd embed(const std::string& text) = 0;
  virtual int dim() const = 0;
};

// Deterministic stand-in: seeds a generator from a digest of the text.
std::unique_ptr<EmbedProvider> make_mock_provider(int d);
// HTTP adapter: POST {"model","input"} to endpoint, expects {"embedding":[..]};
// retries with exponential backoff.
std::unique_ptr<EmbedProvider> make_remote_provider(int d, const std::string& endpoint,
                                                    const std::string& model,
                                                    int max_retries = 4);
// Wraps another provider with an on-disk cache: <dir>/<sha256-of-text>.vec,
// little-endian float32[d].
std::unique_ptr<EmbedProvider> make_cached_provider(std::unique_ptr<EmbedProvider> inner,
                                                    const std::string& cache_dir);

}  // namespace prtraj::poi
