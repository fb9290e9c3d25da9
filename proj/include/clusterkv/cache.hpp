#pragma once

#include <deque>
#include <set>

#include "clusterkv/common.hpp"

namespace ckv {

// ----------------------------------------------------------------------------
// Cluster-granularity cache over a simulated two-tier KV store
// ----------------------------------------------------------------------------

struct CacheCounters {
  uint64_t clusters_requested = 0;
  uint64_t clusters_hit = 0;
  uint64_t tokens_transferred = 0;
  uint64_t bytes_transferred = 0;  // tokens * 2 (K and V) * d * 4 (f32)
};

// Retains the cluster-label sets selected in the last R decode steps; a
// selected cluster already resident costs no transfer. Clusters are cached
// whole even when the selection trimmed them. Sinks and recency tokens are
// not clusters and never pass through here.
class ClusterCache {
 public:
  ClusterCache(uint32_t retention, uint32_t head_dim)
      : retention_(retention), d_(head_dim) {
    if (retention < 1) throw ValidationError("ClusterCache: retention must be >= 1");
  }

  struct LookupResult {
    std::vector<uint32_t> hit_ids;
    std::vector<uint32_t> miss_ids;
  };

  // sizes is the full per-cluster size table (indexed by cluster id).
  LookupResult lookup_and_update(std::span<const uint32_t> selected,
                                 std::span<const uint32_t> sizes) {
    LookupResult res;
    for (uint32_t id : selected) {
      if (resident_.count(id))
        res.hit_ids.push_back(id);
      else
        res.miss_ids.push_back(id);
    }
    counters_.clusters_requested += selected.size();
    counters_.clusters_hit += res.hit_ids.size();
    for (uint32_t id : res.miss_ids) counters_.tokens_transferred += sizes[id];
    counters_.bytes_transferred =
        counters_.tokens_transferred * 2ull * d_ * sizeof(float);

    ring_.emplace_back(selected.begin(), selected.end());
    if (ring_.size() > retention_) ring_.pop_front();
    rebuild_resident();
    return res;
  }

  double hit_rate() const {
    if (counters_.clusters_requested == 0)
      throw ValidationError("ClusterCache: hit_rate with zero requests");
    return double(counters_.clusters_hit) / double(counters_.clusters_requested);
  }

  // Drops retired cluster ids from the retained ring; freshly minted ids
  // start non-resident by construction.
  void invalidate_on_recluster(std::span<const uint32_t> retired,
                               std::span<const uint32_t> fresh) {
    (void)fresh;
    if (retired.empty()) return;
    std::set<uint32_t> dead(retired.begin(), retired.end());
    for (auto& step_set : ring_) {
      std::erase_if(step_set, [&](uint32_t id) { return dead.count(id) > 0; });
    }
    rebuild_resident();
  }

  const CacheCounters& counters() const { return counters_; }
  const std::set<uint32_t>& resident() const { return resident_; }
  uint32_t retention() const { return retention_; }

 private:
  void rebuild_resident() {
    resident_.clear();
    for (const auto& s : ring_) resident_.insert(s.begin(), s.end());
  }

  uint32_t retention_;
  uint32_t d_;
  std::deque<std::vector<uint32_t>> ring_;  // last <= R selected sets
  std::set<uint32_t> resident_;
  CacheCounters counters_;
};

}  // namespace ckv
