#pragma once

#include <cassert>
#include <limits>
#include <numeric>
#include <random>

#include "clusterkv/common.hpp"

namespace ckv {

// ----------------------------------------------------------------------------
// Cosine K-means over key vectors with attention-sink exemption
// ----------------------------------------------------------------------------

// Assignment metric used by clustering. Selection scoring is always the raw
// inner product with the centroid, independent of this choice.
enum class AssignMetric { Cosine, L2, InnerProduct };

struct ClusterConfig {
  uint32_t c0_divisor = 80;    // prefill clusters = round((L - sinks) / divisor)
  uint32_t c_plus = 4;         // new clusters per decode batch
  uint32_t decode_batch = 320; // m: decode steps between clustering events
  uint32_t sink_tokens = 16;   // leading tokens exempt from clustering
  uint32_t max_iters = 50;
  uint64_t seed = 0;
  uint32_t c0_override = 0;    // nonzero: use this prefill cluster count as-is
  AssignMetric metric = AssignMetric::Cosine;

  void validate() const {
    if (c0_divisor < 1) throw ValidationError("ClusterConfig: c0_divisor must be >= 1");
    if (c_plus < 1) throw ValidationError("ClusterConfig: c_plus must be >= 1");
    if (decode_batch < 1) throw ValidationError("ClusterConfig: decode_batch must be >= 1");
    if (max_iters < 1) throw ValidationError("ClusterConfig: max_iters must be >= 1");
  }
};

// Centroids are raw means of member keys, not renormalized; cosine
// assignment normalizes on the fly and selection scores q . mu directly.
struct ClusterModel {
  uint32_t n_clusters = 0;
  Matrix centroids;              // n_clusters x d
  std::vector<int32_t> labels;   // token position -> cluster id; -1 = sink/unlabeled
  uint32_t sink_count = 0;
  bool converged = false;
  uint32_t iterations_used = 0;

  // diagnostics: per-assignment objective values of the last k-means run and
  // iteration counts of every k-means invocation folded into this model
  std::vector<double> objective_history;
  std::vector<uint32_t> repair_iterations;
  std::vector<uint32_t> invocation_iterations;

  uint32_t n_positions() const { return uint32_t(labels.size()); }
};

// D(i,j) = 1 - <a,b> / (|a||b|), clamped to [0,2]. Near-zero-norm inputs are
// treated as orthogonal (distance 1) to flag degenerate keys without NaNs.
inline double cosine_distance(std::span<const float> a, std::span<const float> b) {
  double na = norm_f64(a);
  double nb = norm_f64(b);
  if (na < 1e-12 || nb < 1e-12) return 1.0;
  double d = 1.0 - dot_f64(a, b) / (na * nb);
  return std::clamp(d, 0.0, 2.0);
}

namespace detail {

// Per-metric score where higher is better; ties go to the lowest cluster id.
struct AssignScorer {
  AssignMetric metric;
  const Matrix& centroids;
  std::vector<float> dirs;    // cosine: normalized centroids
  std::vector<double> norms2; // l2: |mu|^2 per centroid

  AssignScorer(AssignMetric m, const Matrix& cents) : metric(m), centroids(cents) {
    if (metric == AssignMetric::Cosine) {
      dirs.assign(cents.data.begin(), cents.data.end());
      for (uint32_t c = 0; c < cents.rows; ++c)
        normalize(std::span<float>(dirs.data() + size_t(c) * cents.cols, cents.cols));
    } else if (metric == AssignMetric::L2) {
      norms2.resize(cents.rows);
      for (uint32_t c = 0; c < cents.rows; ++c)
        norms2[c] = dot_f64(cents.row(c), cents.row(c));
    }
  }

  double score(std::span<const float> key, uint32_t c) const {
    switch (metric) {
      case AssignMetric::Cosine: {
        std::span<const float> dir(dirs.data() + size_t(c) * centroids.cols,
                                   centroids.cols);
        return dot_f64(key, dir);  // monotone in cosine for fixed |key|
      }
      case AssignMetric::L2:
        // argmin |k - mu|^2 == argmax (k.mu - |mu|^2/2)
        return dot_f64(key, centroids.row(c)) - 0.5 * norms2[c];
      case AssignMetric::InnerProduct:
        return dot_f64(key, centroids.row(c));
    }
    return 0.0;
  }

  uint32_t assign(std::span<const float> key) const {
    uint32_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (uint32_t c = 0; c < centroids.rows; ++c) {
      double s = score(key, c);
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    return best;
  }
};

inline double kmeans_objective(const Matrix& keys, const std::vector<int32_t>& labels,
                               const Matrix& centroids) {
  double obj = 0.0;
  for (uint32_t i = 0; i < keys.rows; ++i)
    obj += cosine_distance(keys.row(i), centroids.row(uint32_t(labels[i])));
  return obj;
}

// Reseed every empty cluster with the member of the largest cluster that is
// farthest from its own centroid. Returns the number of repairs.
inline uint32_t repair_empty_clusters(const Matrix& keys, std::vector<int32_t>& labels,
                                      const Matrix& centroids,
                                      std::vector<uint32_t>& counts) {
  uint32_t repairs = 0;
  for (uint32_t c = 0; c < centroids.rows; ++c) {
    if (counts[c] > 0) continue;
    uint32_t largest = uint32_t(std::max_element(counts.begin(), counts.end()) -
                                counts.begin());
    if (counts[largest] <= 1) continue;  // nothing left to steal
    double worst = -1.0;
    uint32_t victim = 0;
    for (uint32_t i = 0; i < keys.rows; ++i) {
      if (uint32_t(labels[i]) != largest) continue;
      double dist = cosine_distance(keys.row(i), centroids.row(largest));
      if (dist > worst) {
        worst = dist;
        victim = i;
      }
    }
    labels[victim] = int32_t(c);
    counts[largest]--;
    counts[c]++;
    repairs++;
  }
  return repairs;
}

}  // namespace detail

// Alternating assignment/update K-means. Initial centroids are C distinct
// rows sampled without replacement; convergence means an assignment pass
// reproduced the previous labels. Labels in the result cover [0, N).
inline ClusterModel kmeans_cosine(const Matrix& keys, uint32_t n_clusters, uint64_t seed,
                                  uint32_t max_iters = 50,
                                  AssignMetric metric = AssignMetric::Cosine,
                                  std::span<const uint32_t> init_rows = {}) {
  const uint32_t n = keys.rows;
  const uint32_t d = keys.cols;
  if (n_clusters < 1 || n_clusters > n)
    throw ValidationError("kmeans: need 1 <= C <= N");
  if (!is_finite(keys)) throw ValidationError("kmeans: keys must be finite");
  bool any_nonzero = false;
  for (uint32_t i = 0; i < n && !any_nonzero; ++i)
    any_nonzero = norm_f64(keys.row(i)) >= 1e-12;
  if (!any_nonzero) throw ValidationError("kmeans: degenerate input, all keys zero-norm");

  ClusterModel model;
  model.n_clusters = n_clusters;
  model.centroids = Matrix(n_clusters, d);
  model.sink_count = 0;

  // init: C distinct rows, sampled without replacement
  std::vector<uint32_t> chosen;
  if (!init_rows.empty()) {
    if (init_rows.size() != n_clusters)
      throw ValidationError("kmeans: init_rows size must equal C");
    chosen.assign(init_rows.begin(), init_rows.end());
  } else {
    std::mt19937_64 rng(seed);
    std::vector<uint32_t> pool(n);
    std::iota(pool.begin(), pool.end(), 0u);
    for (uint32_t c = 0; c < n_clusters; ++c) {
      uint32_t j = c + uint32_t(uniform_below(rng, n - c));
      std::swap(pool[c], pool[j]);
    }
    chosen.assign(pool.begin(), pool.begin() + n_clusters);
  }
  for (uint32_t c = 0; c < n_clusters; ++c) {
    auto src = keys.row(chosen[c]);
    std::copy(src.begin(), src.end(), model.centroids.row(c).begin());
  }

  auto assign_all = [&](std::vector<int32_t>& out) {
    detail::AssignScorer scorer(metric, model.centroids);
    out.resize(n);
    for (uint32_t i = 0; i < n; ++i) out[i] = int32_t(scorer.assign(keys.row(i)));
  };
  auto update_centroids = [&](const std::vector<int32_t>& labels,
                              const std::vector<uint32_t>& counts) {
    std::vector<double> sums(size_t(n_clusters) * d, 0.0);
    for (uint32_t i = 0; i < n; ++i) {
      auto row = keys.row(i);
      double* acc = sums.data() + size_t(labels[i]) * d;
      for (uint32_t j = 0; j < d; ++j) acc[j] += double(row[j]);
    }
    for (uint32_t c = 0; c < n_clusters; ++c) {
      auto dst = model.centroids.row(c);
      const double* acc = sums.data() + size_t(c) * d;
      for (uint32_t j = 0; j < d; ++j) dst[j] = float(acc[j] / double(counts[c]));
    }
  };
  auto count_members = [&](const std::vector<int32_t>& labels) {
    std::vector<uint32_t> counts(n_clusters, 0);
    for (auto l : labels) counts[uint32_t(l)]++;
    return counts;
  };

  std::vector<int32_t> labels;
  assign_all(labels);
  auto counts = count_members(labels);
  if (detail::repair_empty_clusters(keys, labels, model.centroids, counts) > 0)
    model.repair_iterations.push_back(0);
  model.objective_history.push_back(
      detail::kmeans_objective(keys, labels, model.centroids));

  uint32_t iter = 0;
  while (iter < max_iters) {
    update_centroids(labels, counts);
    std::vector<int32_t> next;
    assign_all(next);
    auto next_counts = count_members(next);
    uint32_t repairs =
        detail::repair_empty_clusters(keys, next, model.centroids, next_counts);
    ++iter;
    if (repairs > 0) model.repair_iterations.push_back(iter);
    double obj = detail::kmeans_objective(keys, next, model.centroids);
#ifndef NDEBUG
    // Objective is provably non-increasing for equal-norm keys on
    // repair-free iterations; a repair may move one token to a farther
    // centroid by design.
    if (metric == AssignMetric::Cosine && repairs == 0)
      assert(obj <= model.objective_history.back() + 1e-6);
#endif
    model.objective_history.push_back(obj);
    if (next == labels) {
      model.converged = true;
      break;
    }
    labels = std::move(next);
    counts = std::move(next_counts);
  }
  model.iterations_used = iter;
  model.labels = std::move(labels);
  model.invocation_iterations.push_back(iter);
  return model;
}

// Prefill cluster count: C0 = max(1, round((L - sinks) / divisor)), or the
// explicit override, capped at the number of clusterable tokens.
inline uint32_t prefill_cluster_count(uint32_t prompt_len, const ClusterConfig& cfg) {
  if (prompt_len <= cfg.sink_tokens) return 0;
  uint32_t n = prompt_len - cfg.sink_tokens;
  uint32_t c0 = cfg.c0_override
                    ? cfg.c0_override
                    : uint32_t(std::llround(double(n) / double(cfg.c0_divisor)));
  return std::clamp<uint32_t>(c0, 1, n);
}

// Clusters the prompt keys after prefill. The first sink_tokens positions are
// exempted and always attended; they never receive a label.
inline ClusterModel cluster_prefill(const Matrix& keys, const ClusterConfig& cfg) {
  cfg.validate();
  const uint32_t L = keys.rows;
  if (L <= cfg.sink_tokens) {
    ClusterModel model;
    model.sink_count = L;
    model.labels.assign(L, -1);
    model.converged = true;
    model.centroids = Matrix(0, keys.cols);
    return model;
  }
  const uint32_t sink = cfg.sink_tokens;
  const uint32_t n = L - sink;
  Matrix clusterable(n, keys.cols);
  std::copy(keys.data.begin() + size_t(sink) * keys.cols, keys.data.end(),
            clusterable.data.begin());

  uint32_t c0 = prefill_cluster_count(L, cfg);
  ClusterModel sub =
      kmeans_cosine(clusterable, c0, cfg.seed, cfg.max_iters, cfg.metric);

  ClusterModel model = std::move(sub);
  model.sink_count = sink;
  std::vector<int32_t> labels(L, -1);
  std::copy(model.labels.begin(), model.labels.end(), labels.begin() + sink);
  model.labels = std::move(labels);
  return model;
}

// Clusters one decode batch in isolation and appends the result: fresh
// cluster ids, labels for the next batch-size positions, existing state
// untouched. Empty batches are a no-op.
inline void cluster_decode_batch(ClusterModel& model, const Matrix& new_keys,
                                 const ClusterConfig& cfg) {
  if (new_keys.rows == 0) return;
  cfg.validate();
  uint32_t c = std::min(cfg.c_plus, new_keys.rows);
  uint64_t batch_seed = mix_seed(cfg.seed, 0xdecadeull, model.n_positions());
  ClusterModel sub =
      kmeans_cosine(new_keys, c, batch_seed, cfg.max_iters, cfg.metric);

  uint32_t base = model.n_clusters;
  Matrix merged(base + c, new_keys.cols);
  std::copy(model.centroids.data.begin(), model.centroids.data.end(),
            merged.data.begin());
  std::copy(sub.centroids.data.begin(), sub.centroids.data.end(),
            merged.data.begin() + size_t(base) * new_keys.cols);
  model.centroids = std::move(merged);
  model.n_clusters += c;
  for (auto l : sub.labels) model.labels.push_back(l + int32_t(base));
  model.iterations_used += sub.iterations_used;
  model.converged = model.converged && sub.converged;
  model.objective_history = std::move(sub.objective_history);
  model.invocation_iterations.push_back(sub.iterations_used);
}

}  // namespace ckv
