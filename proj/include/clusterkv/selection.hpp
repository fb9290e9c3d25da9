#pragma once

#include <numeric>
#include <random>
#include <unordered_set>

#include "clusterkv/clustering.hpp"
#include "clusterkv/common.hpp"

namespace ckv {

// ----------------------------------------------------------------------------
// Cluster-granularity token selection and the selection baselines
// ----------------------------------------------------------------------------

// Gather-friendly view of a ClusterModel: per-cluster sizes plus token ids
// sorted by cluster label (position-ascending within a cluster).
struct ClusterIndex {
  std::vector<uint32_t> sizes;
  std::vector<uint32_t> sorted_token_ids;
  std::vector<uint32_t> cluster_start;  // size C+1, prefix offsets into sorted ids

  uint32_t labeled_total() const { return uint32_t(sorted_token_ids.size()); }
  std::span<const uint32_t> cluster_slice(uint32_t c) const {
    return {sorted_token_ids.data() + cluster_start[c], sizes[c]};
  }
};

inline ClusterIndex build_index(const ClusterModel& model) {
  ClusterIndex index;
  const uint32_t c_count = model.n_clusters;
  index.sizes.assign(c_count, 0);
  for (auto l : model.labels)
    if (l >= 0) index.sizes[uint32_t(l)]++;

  index.cluster_start.assign(c_count + 1, 0);
  for (uint32_t c = 0; c < c_count; ++c)
    index.cluster_start[c + 1] = index.cluster_start[c] + index.sizes[c];

  index.sorted_token_ids.resize(index.cluster_start[c_count]);
  std::vector<uint32_t> cursor(index.cluster_start.begin(),
                               index.cluster_start.end() - 1);
  for (uint32_t pos = 0; pos < model.labels.size(); ++pos) {
    int32_t l = model.labels[pos];
    if (l >= 0) index.sorted_token_ids[cursor[uint32_t(l)]++] = pos;
  }
  return index;
}

// score[c] = q . mu_c with the raw (unnormalized) centroid.
inline std::vector<double> score_clusters(std::span<const float> q,
                                          const ClusterModel& model) {
  std::vector<double> scores(model.n_clusters);
  for (uint32_t c = 0; c < model.n_clusters; ++c)
    scores[c] = dot_f64(q, model.centroids.row(c));
  return scores;
}

struct SelectionResult {
  std::vector<uint32_t> ranked_clusters;  // all cluster ids, descending score
  uint32_t n_clusters_taken = 0;
  std::vector<uint32_t> token_ids;        // I_T: cluster tokens, then sinks, then recency
  uint32_t trimmed_from_last = 0;
  uint32_t budget = 0;

  std::span<const uint32_t> taken_clusters() const {
    return {ranked_clusters.data(), n_clusters_taken};
  }
};

// Takes clusters in descending score order until the running size reaches the
// budget; the last taken cluster is trimmed to its lowest-position ids when
// the running size overshoots. Sink and recency ids ride outside the budget.
inline SelectionResult select_tokens(std::span<const float> q, const ClusterModel& model,
                                     const ClusterIndex& index, uint32_t budget,
                                     std::span<const uint32_t> recency = {}) {
  SelectionResult res;
  res.budget = budget;

  auto scores = score_clusters(q, model);
  res.ranked_clusters.resize(model.n_clusters);
  std::iota(res.ranked_clusters.begin(), res.ranked_clusters.end(), 0u);
  std::sort(res.ranked_clusters.begin(), res.ranked_clusters.end(),
            [&](uint32_t a, uint32_t b) {
              if (scores[a] != scores[b]) return scores[a] > scores[b];
              return a < b;
            });

  res.token_ids.reserve(std::min<size_t>(index.labeled_total(), budget) +
                        model.sink_count + recency.size());
  uint32_t cum = 0;
  for (uint32_t c : res.ranked_clusters) {
    if (cum >= budget) break;
    auto slice = index.cluster_slice(c);
    uint32_t remaining = budget - cum;
    if (slice.size() <= remaining) {
      res.token_ids.insert(res.token_ids.end(), slice.begin(), slice.end());
      cum += uint32_t(slice.size());
    } else {
      res.token_ids.insert(res.token_ids.end(), slice.begin(),
                           slice.begin() + remaining);
      res.trimmed_from_last = uint32_t(slice.size()) - remaining;
      cum = budget;
    }
    res.n_clusters_taken++;
  }

  for (uint32_t s = 0; s < model.sink_count; ++s) res.token_ids.push_back(s);
  res.token_ids.insert(res.token_ids.end(), recency.begin(), recency.end());
  return res;
}

// Ground-truth oracle: indices of the B largest q.k_i, ties to the lowest
// index. Returned ascending.
inline std::vector<uint32_t> exact_topb(std::span<const float> q, const Matrix& keys,
                                        uint32_t budget) {
  const uint32_t n = keys.rows;
  std::vector<double> scores(n);
  for (uint32_t i = 0; i < n; ++i) scores[i] = dot_f64(q, keys.row(i));

  std::vector<uint32_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0u);
  uint32_t take = std::min(budget, n);
  std::partial_sort(ids.begin(), ids.begin() + take, ids.end(),
                    [&](uint32_t a, uint32_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  ids.resize(take);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Page-based baseline: consecutive fixed-size pages, scored through a
// per-channel representative key.
enum class PageRepr {
  Max,     // elementwise max over member keys
  MaxMin,  // score = sum_ch max(q*max_k, q*min_k), the upper-bound variant
};

inline std::vector<uint32_t> page_select(std::span<const float> q, const Matrix& keys,
                                         uint32_t budget, uint32_t page_size,
                                         PageRepr repr = PageRepr::Max) {
  if (page_size < 1) throw ValidationError("page_select: page_size must be >= 1");
  const uint32_t n = keys.rows;
  const uint32_t d = keys.cols;
  const uint32_t n_pages = (n + page_size - 1) / page_size;
  const uint32_t n_sel = std::min(n_pages, budget / page_size);

  std::vector<double> page_scores(n_pages);
  std::vector<float> max_rep(d), min_rep(d);
  for (uint32_t p = 0; p < n_pages; ++p) {
    uint32_t begin = p * page_size;
    uint32_t end = std::min(n, begin + page_size);
    std::copy_n(keys.row(begin).data(), d, max_rep.begin());
    std::copy_n(keys.row(begin).data(), d, min_rep.begin());
    for (uint32_t i = begin + 1; i < end; ++i) {
      auto row = keys.row(i);
      for (uint32_t j = 0; j < d; ++j) {
        max_rep[j] = std::max(max_rep[j], row[j]);
        min_rep[j] = std::min(min_rep[j], row[j]);
      }
    }
    if (repr == PageRepr::Max) {
      page_scores[p] = dot_f64(q, max_rep);
    } else {
      double s = 0.0;
      for (uint32_t j = 0; j < d; ++j)
        s += std::max(double(q[j]) * double(max_rep[j]),
                      double(q[j]) * double(min_rep[j]));
      page_scores[p] = s;
    }
  }

  std::vector<uint32_t> pages(n_pages);
  std::iota(pages.begin(), pages.end(), 0u);
  std::partial_sort(pages.begin(), pages.begin() + n_sel, pages.end(),
                    [&](uint32_t a, uint32_t b) {
                      if (page_scores[a] != page_scores[b])
                        return page_scores[a] > page_scores[b];
                      return a < b;
                    });
  pages.resize(n_sel);

  std::vector<uint32_t> ids;
  ids.reserve(size_t(n_sel) * page_size);
  for (uint32_t p : pages) {
    uint32_t begin = p * page_size;
    uint32_t end = std::min(n, begin + page_size);
    for (uint32_t i = begin; i < end; ++i) ids.push_back(i);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Non-recallable greedy baseline: keeps a running top-B by accumulated
// attention weight over the retained tokens only. Evicted ids never return.
class GreedyEvictState {
 public:
  explicit GreedyEvictState(uint32_t budget) : budget_(budget) {
    if (budget < 1) throw ValidationError("greedy: budget must be >= 1");
  }

  // One decode step: new rows of `keys` join the candidate set, attention
  // weights accumulate over retained tokens, then the set is cut to budget.
  // Returns the retained ids, ascending.
  const std::vector<uint32_t>& step(std::span<const float> q, const Matrix& keys) {
    for (uint32_t i = seen_; i < keys.rows; ++i) retained_.push_back(i);
    seen_ = keys.rows;
    acc_.resize(seen_, 0.0);

    const double scale = 1.0 / std::sqrt(double(keys.cols));
    std::vector<double> logits(retained_.size());
    double max_logit = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < retained_.size(); ++i) {
      logits[i] = dot_f64(q, keys.row(retained_[i])) * scale;
      max_logit = std::max(max_logit, logits[i]);
    }
    double sum = 0.0;
    for (auto& l : logits) {
      l = std::exp(l - max_logit);
      sum += l;
    }
    for (size_t i = 0; i < retained_.size(); ++i)
      acc_[retained_[i]] += logits[i] / sum;

    if (retained_.size() > budget_) {
      std::partial_sort(retained_.begin(), retained_.begin() + budget_,
                        retained_.end(), [&](uint32_t a, uint32_t b) {
                          if (acc_[a] != acc_[b]) return acc_[a] > acc_[b];
                          return a < b;
                        });
      retained_.resize(budget_);
    }
    std::sort(retained_.begin(), retained_.end());
    return retained_;
  }

  const std::vector<uint32_t>& retained() const { return retained_; }

 private:
  uint32_t budget_;
  uint32_t seen_ = 0;
  std::vector<uint32_t> retained_;
  std::vector<double> acc_;
};

}  // namespace ckv
