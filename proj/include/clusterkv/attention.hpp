#pragma once

#include "clusterkv/common.hpp"

namespace ckv {

// ----------------------------------------------------------------------------
// Exact and budget-approximated scaled-dot-product attention
// ----------------------------------------------------------------------------

struct AttentionOutput {
  std::vector<float> out;      // d
  std::vector<float> weights;  // one per attended token, sums to 1
};

namespace detail {

// softmax(q K^T / sqrt(d)) V over the given rows, max-subtracted, with
// 64-bit accumulation for dots, the softmax sum and the output.
inline AttentionOutput attention_over(std::span<const float> q, const Matrix& keys,
                                      const Matrix& values,
                                      std::span<const uint32_t> rows) {
  const uint32_t d = keys.cols;
  const double scale = 1.0 / std::sqrt(double(d));

  std::vector<double> logits(rows.size());
  double max_logit = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < rows.size(); ++i) {
    logits[i] = dot_f64(q, keys.row(rows[i])) * scale;
    max_logit = std::max(max_logit, logits[i]);
  }
  double sum = 0.0;
  for (auto& l : logits) {
    l = std::exp(l - max_logit);
    sum += l;
  }

  AttentionOutput out;
  out.weights.resize(rows.size());
  std::vector<double> acc(d, 0.0);
  for (size_t i = 0; i < rows.size(); ++i) {
    double w = logits[i] / sum;
    out.weights[i] = float(w);
    auto v = values.row(rows[i]);
    for (uint32_t j = 0; j < d; ++j) acc[j] += w * double(v[j]);
  }
  out.out.resize(d);
  for (uint32_t j = 0; j < d; ++j) out.out[j] = float(acc[j]);
  return out;
}

}  // namespace detail

inline AttentionOutput full_attention(std::span<const float> q, const Matrix& keys,
                                      const Matrix& values) {
  if (keys.rows < 1) throw ValidationError("full_attention: need at least one token");
  std::vector<uint32_t> all(keys.rows);
  std::iota(all.begin(), all.end(), 0u);
  return detail::attention_over(q, keys, values, all);
}

// full_attention restricted to the selected rows.
inline AttentionOutput approx_attention(std::span<const float> q, const Matrix& keys,
                                        const Matrix& values,
                                        std::span<const uint32_t> selected) {
  if (selected.empty())
    throw ValidationError("approx_attention: empty selection");
  return detail::attention_over(q, keys, values, selected);
}

// |selected ∩ truth| / |truth|
inline double recall_rate(std::span<const uint32_t> selected,
                          std::span<const uint32_t> truth) {
  if (truth.empty()) throw ValidationError("recall_rate: truth set must be non-empty");
  std::vector<uint32_t> a(selected.begin(), selected.end());
  std::vector<uint32_t> b(truth.begin(), truth.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  size_t hits = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++hits;
      ++ia;
      ++ib;
    }
  }
  return double(hits) / double(b.size());
}

struct OutputError {
  double l2_rel = 0.0;   // |a - e| / |e|, or absolute |a - e| when flagged
  double cos_sim = 1.0;
  bool exact_zero_norm = false;
};

inline OutputError output_error(const AttentionOutput& approx,
                                const AttentionOutput& exact) {
  if (approx.out.size() != exact.out.size())
    throw ValidationError("output_error: dimension mismatch");
  double diff2 = 0.0, e2 = 0.0, a2 = 0.0, dot = 0.0;
  for (size_t i = 0; i < exact.out.size(); ++i) {
    double a = approx.out[i];
    double e = exact.out[i];
    diff2 += (a - e) * (a - e);
    e2 += e * e;
    a2 += a * a;
    dot += a * e;
  }
  OutputError err;
  double e_norm = std::sqrt(e2);
  double a_norm = std::sqrt(a2);
  if (e_norm < 1e-12) {
    err.exact_zero_norm = true;
    err.l2_rel = std::sqrt(diff2);  // absolute fallback
  } else {
    err.l2_rel = std::sqrt(diff2) / e_norm;
  }
  if (a_norm < 1e-12 && e_norm < 1e-12)
    err.cos_sim = 1.0;
  else if (a_norm < 1e-12 || e_norm < 1e-12)
    err.cos_sim = 0.0;
  else
    err.cos_sim = dot / (a_norm * e_norm);
  return err;
}

}  // namespace ckv
