#pragma once

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "clusterkv/attention.hpp"
#include "clusterkv/cache.hpp"
#include "clusterkv/clustering.hpp"
#include "clusterkv/selection.hpp"
#include "clusterkv/trace.hpp"

namespace ckv {

// ----------------------------------------------------------------------------
// Simulated decode loop over a TraceBundle, one run per policy
// ----------------------------------------------------------------------------

enum class Policy { ClusterKV, Page, Oracle, Greedy, Random, Full };

inline const char* policy_name(Policy p) {
  switch (p) {
    case Policy::ClusterKV: return "clusterkv";
    case Policy::Page: return "page";
    case Policy::Oracle: return "oracle";
    case Policy::Greedy: return "greedy";
    case Policy::Random: return "random";
    case Policy::Full: return "full";
  }
  return "?";
}

inline Policy policy_from_name(const std::string& name) {
  for (Policy p : {Policy::ClusterKV, Policy::Page, Policy::Oracle, Policy::Greedy,
                   Policy::Random, Policy::Full})
    if (name == policy_name(p)) return p;
  throw ValidationError("unknown policy: " + name);
}

struct PolicyConfig {
  Policy policy = Policy::ClusterKV;
  uint32_t budget = 1024;
  ClusterConfig cluster;
  uint32_t page_size = 16;
  PageRepr page_repr = PageRepr::Max;
  uint32_t retention = 1;
  bool recency_window = true;
  std::set<uint32_t> full_attention_layers;  // layers running full KV, no selection
  bool async_clustering = false;
  uint32_t async_delay = 8;  // steps between batch completion and registration
  uint64_t seed = 0;         // harness-level stream (random policy)
  bool record_selection_log = false;

  void validate() const {
    if (budget < 1) throw ValidationError("PolicyConfig: budget must be >= 1");
    if (page_size < 1) throw ValidationError("PolicyConfig: page_size must be >= 1");
    if (retention < 1) throw ValidationError("PolicyConfig: retention must be >= 1");
    cluster.validate();
  }
};

struct StepRow {
  uint32_t step = 0;
  uint32_t layer = 0;
  uint32_t head = 0;
  double recall = 0.0;
  double l2_rel = 0.0;
  double cos_sim = 1.0;
  uint64_t clusters_hit = 0;
  uint64_t clusters_requested = 0;
  uint64_t tokens_transferred = 0;

  bool operator==(const StepRow&) const = default;
};

struct RunSummary {
  std::string policy;
  uint32_t budget = 0;
  double mean_recall = 0.0;
  double mean_l2_rel = 0.0;
  double mean_cos_sim = 0.0;
  double hit_rate = 0.0;  // aggregate hits / requests, 0 when nothing requested
  uint64_t tokens_transferred = 0;
  uint64_t bytes_transferred = 0;
  std::map<uint32_t, uint32_t> iteration_histogram;  // k-means iterations -> count
  double wall_ms = 0.0;

  bool operator==(const RunSummary&) const = default;
};

struct RunReport {
  std::vector<StepRow> rows;
  RunSummary summary;

  // Per-(layer,head) logs, filled only when record_selection_log is set;
  // never serialized. selection_log holds selected cluster ids per step,
  // token_log the full I_T per step.
  std::vector<std::vector<std::vector<uint32_t>>> selection_log;
  std::vector<std::vector<std::vector<uint32_t>>> token_log;
};

namespace detail {

struct HeadResult {
  std::vector<StepRow> rows;
  std::vector<std::vector<uint32_t>> selection_log;
  std::vector<std::vector<uint32_t>> token_log;
  std::vector<uint32_t> kmeans_iterations;
  uint64_t tokens_transferred = 0;
  uint64_t bytes_transferred = 0;
};

// Grows row-by-row without reallocating per step.
class GrowMatrix {
 public:
  GrowMatrix(uint32_t capacity, uint32_t cols) : m_(capacity, cols) {}

  void push(std::span<const float> row) {
    std::copy(row.begin(), row.end(), m_.row(n_).begin());
    ++n_;
    view_.rows = n_;
  }
  // Matrix view over the first n rows; data is shared, rows is logical.
  const Matrix& view() {
    view_.cols = m_.cols;
    view_.rows = n_;
    if (view_.data.empty()) view_.data = m_.data;  // one-time copy avoided below
    return m_sized();
  }
  uint32_t size() const { return n_; }

 private:
  const Matrix& m_sized() {
    sized_.rows = n_;
    sized_.cols = m_.cols;
    sized_.data = m_.data;  // cheap? no: full copy. replaced by span-based API
    return sized_;
  }
  Matrix m_;
  Matrix view_;
  Matrix sized_;
  uint32_t n_ = 0;
};

inline HeadResult simulate_head(const HeadTrace& tr, uint32_t layer, uint32_t head,
                                const PolicyConfig& cfg) {
  const uint32_t L = tr.prompt_len;
  const uint32_t T = tr.decode_len;
  const uint32_t d = tr.d;
  const bool exempt = cfg.full_attention_layers.count(layer) > 0;

  HeadResult result;
  result.rows.reserve(T);

  // context grows from L to L+T-1 rows over the run
  Matrix keys(L + T, d);
  Matrix values(L + T, d);
  std::copy(tr.prompt_keys.data.begin(), tr.prompt_keys.data.end(), keys.data.begin());
  std::copy(tr.prompt_values.data.begin(), tr.prompt_values.data.end(),
            values.data.begin());
  auto ctx_keys = [&](uint32_t n) {
    Matrix view;  // shallow: constructed per step from the backing store
    view.rows = n;
    view.cols = d;
    return view;
  };
  (void)ctx_keys;

  if (exempt) {
    for (uint32_t t = 0; t < T; ++t) {
      StepRow row;
      row.step = t;
      row.layer = layer;
      row.head = head;
      row.recall = 1.0;
      row.l2_rel = 0.0;
      row.cos_sim = 1.0;
      result.rows.push_back(row);
    }
    return result;
  }

  // ---- policy state ----
  ClusterConfig ccfg = cfg.cluster;
  ccfg.seed = mix_seed(cfg.cluster.seed, layer, head);
  ClusterModel model;
  ClusterIndex index;
  std::unique_ptr<ClusterCache> cache;
  uint32_t labeled_end = L;
  Matrix pending(ccfg.decode_batch, d);
  uint32_t pending_n = 0;
  std::deque<std::pair<uint32_t, Matrix>> async_queue;  // (register_step, batch)

  GreedyEvictState greedy(cfg.budget);
  std::mt19937_64 random_rng(mix_seed(cfg.seed, layer, head) ^ 0x52414e44ull);
  std::vector<uint32_t> shuffle_pool;

  if (cfg.policy == Policy::ClusterKV) {
    model = cluster_prefill(tr.prompt_keys, ccfg);
    index = build_index(model);
    cache = std::make_unique<ClusterCache>(cfg.retention, d);
    result.kmeans_iterations = model.invocation_iterations;
  }

  Matrix ctx(0, d);  // shallow re-sized view over `keys`
  Matrix vctx(0, d);

  for (uint32_t t = 0; t < T; ++t) {
    const uint32_t n_ctx = L + t;
    auto q = tr.decode_queries.row(t);
    const uint32_t b_eff = std::min(cfg.budget, n_ctx);

    // resize the shallow context views
    ctx.rows = n_ctx;
    ctx.data.assign(keys.data.begin(), keys.data.begin() + size_t(n_ctx) * d);
    vctx.rows = n_ctx;
    vctx.data.assign(values.data.begin(), values.data.begin() + size_t(n_ctx) * d);

    std::vector<uint32_t> truth = exact_topb(q, ctx, b_eff);

    std::vector<uint32_t> selected_ids;
    uint64_t step_hits = 0, step_requests = 0, step_tokens = 0;
    std::vector<uint32_t> selected_clusters;

    switch (cfg.policy) {
      case Policy::ClusterKV: {
        if (cfg.async_clustering) {
          while (!async_queue.empty() && async_queue.front().first <= t) {
            cluster_decode_batch(model, async_queue.front().second, ccfg);
            result.kmeans_iterations.push_back(model.invocation_iterations.back());
            index = build_index(model);
            labeled_end += async_queue.front().second.rows;
            async_queue.pop_front();
          }
        }
        std::vector<uint32_t> recency;
        if (cfg.recency_window)
          for (uint32_t p = labeled_end; p < n_ctx; ++p) recency.push_back(p);
        SelectionResult sel = select_tokens(q, model, index, cfg.budget, recency);
        selected_clusters.assign(sel.taken_clusters().begin(),
                                 sel.taken_clusters().end());
        std::sort(selected_clusters.begin(), selected_clusters.end());
        auto before = cache->counters();
        cache->lookup_and_update(selected_clusters, index.sizes);
        auto after = cache->counters();
        step_hits = after.clusters_hit - before.clusters_hit;
        step_requests = after.clusters_requested - before.clusters_requested;
        step_tokens = after.tokens_transferred - before.tokens_transferred;
        selected_ids = std::move(sel.token_ids);
        break;
      }
      case Policy::Page:
        selected_ids = page_select(q, ctx, cfg.budget, cfg.page_size, cfg.page_repr);
        break;
      case Policy::Oracle:
        selected_ids = truth;
        break;
      case Policy::Greedy:
        selected_ids = greedy.step(q, ctx);
        break;
      case Policy::Random: {
        if (shuffle_pool.size() < n_ctx) {
          shuffle_pool.resize(n_ctx);
          std::iota(shuffle_pool.begin(), shuffle_pool.end(), 0u);
        }
        for (uint32_t i = 0; i < b_eff; ++i) {
          uint32_t j = i + uint32_t(uniform_below(random_rng, n_ctx - i));
          std::swap(shuffle_pool[i], shuffle_pool[j]);
        }
        selected_ids.assign(shuffle_pool.begin(), shuffle_pool.begin() + b_eff);
        std::sort(selected_ids.begin(), selected_ids.end());
        break;
      }
      case Policy::Full: {
        selected_ids.resize(n_ctx);
        std::iota(selected_ids.begin(), selected_ids.end(), 0u);
        break;
      }
    }

    AttentionOutput exact = full_attention(q, ctx, vctx);
    AttentionOutput approx;
    if (selected_ids.empty()) {
      approx.out.assign(d, 0.0f);  // degenerate selection attends nothing
    } else {
      approx = approx_attention(q, ctx, vctx, selected_ids);
    }
    OutputError err = output_error(approx, exact);

    StepRow row;
    row.step = t;
    row.layer = layer;
    row.head = head;
    row.recall = recall_rate(selected_ids, truth);
    row.l2_rel = err.l2_rel;
    row.cos_sim = err.cos_sim;
    row.clusters_hit = step_hits;
    row.clusters_requested = step_requests;
    row.tokens_transferred = step_tokens;
    result.rows.push_back(row);

    if (cfg.record_selection_log) {
      result.selection_log.push_back(std::move(selected_clusters));
      std::sort(selected_ids.begin(), selected_ids.end());
      result.token_log.push_back(std::move(selected_ids));
    }

    // append this step's generated token
    std::copy_n(tr.decode_keys.row(t).data(), d, keys.row(n_ctx).begin());
    std::copy_n(tr.decode_values.row(t).data(), d, values.row(n_ctx).begin());

    if (cfg.policy == Policy::ClusterKV) {
      std::copy_n(tr.decode_keys.row(t).data(), d, pending.row(pending_n).begin());
      ++pending_n;
      if (pending_n == ccfg.decode_batch) {
        Matrix batch(pending_n, d);
        std::copy_n(pending.data.begin(), size_t(pending_n) * d, batch.data.begin());
        if (cfg.async_clustering) {
          async_queue.emplace_back(t + cfg.async_delay, std::move(batch));
        } else {
          cluster_decode_batch(model, batch, ccfg);
          result.kmeans_iterations.push_back(model.invocation_iterations.back());
          index = build_index(model);
          labeled_end += pending_n;
        }
        pending_n = 0;
      }
    }
  }

  if (cache) {
    result.tokens_transferred = cache->counters().tokens_transferred;
    result.bytes_transferred = cache->counters().bytes_transferred;
  }
  return result;
}

}  // namespace detail

inline RunReport run_simulation(const TraceBundle& bundle, const PolicyConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  bundle.validate();
  cfg.validate();
  for (uint32_t layer : cfg.full_attention_layers)
    if (layer >= bundle.n_layers)
      throw ValidationError("full_attention_layers: layer id out of range");

  const size_t units = size_t(bundle.n_layers) * bundle.n_heads;
  std::vector<detail::HeadResult> results(units);

  // heads are independent work units; fan out, then merge in unit order
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::future<void>> futures;
  std::atomic<size_t> next_unit{0};
  auto worker = [&]() {
    for (;;) {
      size_t u = next_unit.fetch_add(1);
      if (u >= units) return;
      uint32_t layer = uint32_t(u / bundle.n_heads);
      uint32_t head = uint32_t(u % bundle.n_heads);
      results[u] = detail::simulate_head(bundle.at(layer, head), layer, head, cfg);
    }
  };
  unsigned n_workers = std::min<unsigned>(hw, unsigned(units));
  for (unsigned w = 0; w + 1 < n_workers; ++w)
    futures.push_back(std::async(std::launch::async, worker));
  worker();
  for (auto& f : futures) f.get();

  RunReport report;
  report.summary.policy = policy_name(cfg.policy);
  report.summary.budget = cfg.budget;

  double sum_recall = 0.0, sum_l2 = 0.0, sum_cos = 0.0;
  uint64_t total_hits = 0, total_requests = 0;
  for (auto& r : results) {
    for (const auto& row : r.rows) {
      sum_recall += row.recall;
      sum_l2 += row.l2_rel;
      sum_cos += row.cos_sim;
      total_hits += row.clusters_hit;
      total_requests += row.clusters_requested;
    }
    report.rows.insert(report.rows.end(), r.rows.begin(), r.rows.end());
    report.summary.tokens_transferred += r.tokens_transferred;
    report.summary.bytes_transferred += r.bytes_transferred;
    for (uint32_t it : r.kmeans_iterations) report.summary.iteration_histogram[it]++;
    if (cfg.record_selection_log) {
      report.selection_log.push_back(std::move(r.selection_log));
      report.token_log.push_back(std::move(r.token_log));
    }
  }
  size_t n_rows = report.rows.size();
  if (n_rows > 0) {
    report.summary.mean_recall = sum_recall / double(n_rows);
    report.summary.mean_l2_rel = sum_l2 / double(n_rows);
    report.summary.mean_cos_sim = sum_cos / double(n_rows);
  }
  report.summary.hit_rate =
      total_requests ? double(total_hits) / double(total_requests) : 0.0;

  auto t1 = std::chrono::steady_clock::now();
  report.summary.wall_ms =
      std::chrono::duration<double, std::milli>(t1 - t0).count();
  return report;
}

// ----------------------------------------------------------------------------
// Parameter sweeps
// ----------------------------------------------------------------------------

enum class SweepAxis { Budget, C0, Distance, Retention };

inline SweepAxis sweep_axis_from_name(const std::string& name) {
  if (name == "budget") return SweepAxis::Budget;
  if (name == "c0") return SweepAxis::C0;
  if (name == "distance") return SweepAxis::Distance;
  if (name == "retention") return SweepAxis::Retention;
  throw ValidationError("unknown sweep axis: " + name);
}

inline AssignMetric metric_from_name(const std::string& name) {
  if (name == "cosine") return AssignMetric::Cosine;
  if (name == "l2") return AssignMetric::L2;
  if (name == "ip" || name == "inner-product") return AssignMetric::InnerProduct;
  throw ValidationError("unknown distance metric: " + name);
}

inline const char* metric_name(AssignMetric m) {
  switch (m) {
    case AssignMetric::Cosine: return "cosine";
    case AssignMetric::L2: return "l2";
    case AssignMetric::InnerProduct: return "ip";
  }
  return "?";
}

// One full run per value. The distance axis swaps the clustering assignment
// metric; selection scoring stays inner-product throughout.
inline std::vector<RunReport> sweep(const TraceBundle& bundle,
                                    const PolicyConfig& base, SweepAxis axis,
                                    const std::vector<std::string>& values) {
  if (values.empty()) throw ValidationError("sweep: empty value list");
  std::vector<RunReport> reports;
  reports.reserve(values.size());
  for (const auto& v : values) {
    PolicyConfig cfg = base;
    switch (axis) {
      case SweepAxis::Budget:
        cfg.budget = uint32_t(std::stoul(v));
        break;
      case SweepAxis::C0:
        cfg.cluster.c0_override = uint32_t(std::stoul(v));
        break;
      case SweepAxis::Distance:
        cfg.cluster.metric = metric_from_name(v);
        break;
      case SweepAxis::Retention:
        cfg.retention = uint32_t(std::stoul(v));
        break;
    }
    reports.push_back(run_simulation(bundle, cfg));
  }
  return reports;
}

// ----------------------------------------------------------------------------
// Report emission: deterministic CSV and JSON
// ----------------------------------------------------------------------------

namespace detail {

inline std::string fmt_g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace detail

inline std::string report_to_csv(const RunReport& report) {
  std::string out =
      "step,layer,head,recall,l2_rel,cos_sim,clusters_hit,clusters_requested,"
      "tokens_transferred\n";
  char buf[256];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%u,%u,%u,%s,%s,%s,%" PRIu64 ",%" PRIu64 ",%" PRIu64 "\n",
                  r.step, r.layer, r.head, detail::fmt_g6(r.recall).c_str(),
                  detail::fmt_g6(r.l2_rel).c_str(), detail::fmt_g6(r.cos_sim).c_str(),
                  r.clusters_hit, r.clusters_requested, r.tokens_transferred);
    out += buf;
  }
  return out;
}

inline nlohmann::json report_to_json(const RunReport& report) {
  nlohmann::json j;
  nlohmann::json hist = nlohmann::json::object();
  for (auto [iters, count] : report.summary.iteration_histogram)
    hist[std::to_string(iters)] = count;
  j["summary"] = {
      {"policy", report.summary.policy},
      {"budget", report.summary.budget},
      {"mean_recall", report.summary.mean_recall},
      {"mean_l2_rel", report.summary.mean_l2_rel},
      {"mean_cos_sim", report.summary.mean_cos_sim},
      {"hit_rate", report.summary.hit_rate},
      {"tokens_transferred", report.summary.tokens_transferred},
      {"bytes_transferred", report.summary.bytes_transferred},
      {"iteration_histogram", hist},
      {"wall_ms", report.summary.wall_ms},
  };
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows)
    rows.push_back({r.step, r.layer, r.head, r.recall, r.l2_rel, r.cos_sim,
                    r.clusters_hit, r.clusters_requested, r.tokens_transferred});
  j["rows"] = rows;
  return j;
}

inline RunReport report_from_json(const nlohmann::json& j) {
  RunReport report;
  const auto& s = j.at("summary");
  report.summary.policy = s.at("policy").get<std::string>();
  report.summary.budget = s.at("budget").get<uint32_t>();
  report.summary.mean_recall = s.at("mean_recall").get<double>();
  report.summary.mean_l2_rel = s.at("mean_l2_rel").get<double>();
  report.summary.mean_cos_sim = s.at("mean_cos_sim").get<double>();
  report.summary.hit_rate = s.at("hit_rate").get<double>();
  report.summary.tokens_transferred = s.at("tokens_transferred").get<uint64_t>();
  report.summary.bytes_transferred = s.at("bytes_transferred").get<uint64_t>();
  for (auto& [k, v] : s.at("iteration_histogram").items())
    report.summary.iteration_histogram[uint32_t(std::stoul(k))] = v.get<uint32_t>();
  report.summary.wall_ms = s.at("wall_ms").get<double>();
  for (const auto& r : j.at("rows")) {
    StepRow row;
    row.step = r.at(0).get<uint32_t>();
    row.layer = r.at(1).get<uint32_t>();
    row.head = r.at(2).get<uint32_t>();
    row.recall = r.at(3).get<double>();
    row.l2_rel = r.at(4).get<double>();
    row.cos_sim = r.at(5).get<double>();
    row.clusters_hit = r.at(6).get<uint64_t>();
    row.clusters_requested = r.at(7).get<uint64_t>();
    row.tokens_transferred = r.at(8).get<uint64_t>();
    report.rows.push_back(row);
  }
  return report;
}

enum class ReportFormat { Csv, Json };

inline void emit_report(const RunReport& report, ReportFormat format,
                        const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  if (format == ReportFormat::Csv) {
    f << report_to_csv(report);
  } else {
    f << report_to_json(report).dump(2) << "\n";
  }
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace ckv
