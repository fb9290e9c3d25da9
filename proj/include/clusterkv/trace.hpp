#pragma once

#include <cstdio>
#include <cstring>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "clusterkv/common.hpp"

namespace ckv {

// ----------------------------------------------------------------------------
// Head-level tensor data model
// ----------------------------------------------------------------------------

// One attention head's worth of a decode run: the prompt KV plus the
// queries/keys/values of every decoded step.
struct HeadTrace {
  uint32_t d = 0;           // channels per head
  uint32_t prompt_len = 0;  // L
  uint32_t decode_len = 0;  // T

  Matrix prompt_keys;     // L x d
  Matrix prompt_values;   // L x d
  Matrix decode_queries;  // T x d
  Matrix decode_keys;     // T x d
  Matrix decode_values;   // T x d

  bool operator==(const HeadTrace&) const = default;

  void validate() const {
    auto check = [&](const Matrix& m, uint32_t r, const char* name) {
      if (m.rows != r || m.cols != d)
        throw ValidationError(std::string("HeadTrace: bad shape for ") + name);
      if (!is_finite(m))
        throw ValidationError(std::string("HeadTrace: non-finite values in ") + name);
    };
    check(prompt_keys, prompt_len, "prompt_keys");
    check(prompt_values, prompt_len, "prompt_values");
    check(decode_queries, decode_len, "decode_queries");
    check(decode_keys, decode_len, "decode_keys");
    check(decode_values, decode_len, "decode_values");
  }
};

struct TraceBundle {
  uint32_t n_layers = 0;
  uint32_t n_heads = 0;
  std::vector<HeadTrace> traces;  // layer-major: index = layer * n_heads + head
  std::map<std::string, std::string> metadata;

  bool operator==(const TraceBundle&) const = default;

  const HeadTrace& at(uint32_t layer, uint32_t head) const {
    return traces[size_t(layer) * n_heads + head];
  }
  HeadTrace& at(uint32_t layer, uint32_t head) {
    return traces[size_t(layer) * n_heads + head];
  }

  void validate() const {
    if (n_layers == 0 || n_heads == 0)
      throw ValidationError("TraceBundle: n_layers and n_heads must be >= 1");
    if (traces.size() != size_t(n_layers) * n_heads)
      throw ValidationError("TraceBundle: trace count does not match n_layers * n_heads");
    const auto& first = traces.front();
    for (const auto& tr : traces) {
      if (tr.d != first.d || tr.prompt_len != first.prompt_len ||
          tr.decode_len != first.decode_len)
        throw ValidationError("TraceBundle: heads disagree on d/L/T");
      tr.validate();
    }
  }
};

// ----------------------------------------------------------------------------
// Synthetic generator
// ----------------------------------------------------------------------------

// Keys come from a mixture of directional clusters; queries drift across the
// cluster directions over decode steps so the important-token set moves.
struct SynthSpec {
  uint32_t n_centers = 8;
  float center_spread = 1.0f;  // angular spread of the centers themselves
  float intra_spread = 0.15f;  // angular spread of keys around their center
  float query_drift = 0.15f;   // per-step step size of the query walk
  uint64_t seed = 0;
  uint32_t prompt_len = 4096;  // L
  uint32_t decode_len = 256;   // T
  uint32_t d = 128;
  uint32_t n_layers = 2;
  uint32_t n_heads = 4;

  void validate() const {
    if (n_centers < 1) throw ValidationError("SynthSpec: n_centers must be >= 1");
    if (prompt_len < 1) throw ValidationError("SynthSpec: prompt_len must be >= 1");
    if (d < 1) throw ValidationError("SynthSpec: d must be >= 1");
    if (n_layers < 1 || n_heads < 1)
      throw ValidationError("SynthSpec: n_layers and n_heads must be >= 1");
    if (center_spread < 0.0f || intra_spread < 0.0f || query_drift < 0.0f)
      throw ValidationError("SynthSpec: spreads and drift must be non-negative");
  }
};

// Generator-side cluster assignments, for tests that score clustering
// quality against the ground truth.
struct SynthTruth {
  // indexed like TraceBundle::traces
  std::vector<std::vector<uint32_t>> prompt_clusters;
  std::vector<std::vector<uint32_t>> decode_clusters;
};

namespace detail {

template <typename Engine>
inline void fill_gaussian(Engine& rng, std::span<float> out) {
  for (auto& x : out) x = float(gaussian(rng));
}

// unit direction = normalize(base + spread * noise)
template <typename Engine>
inline void spread_direction(Engine& rng, std::span<const float> base, float spread,
                             std::span<float> out) {
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = base[i] + spread * float(gaussian(rng));
  normalize(out);
}

inline HeadTrace generate_head(const SynthSpec& spec, uint64_t sub_seed,
                               std::vector<uint32_t>* prompt_truth,
                               std::vector<uint32_t>* decode_truth) {
  std::mt19937_64 rng(sub_seed);
  const uint32_t d = spec.d;

  HeadTrace tr;
  tr.d = d;
  tr.prompt_len = spec.prompt_len;
  tr.decode_len = spec.decode_len;
  tr.prompt_keys = Matrix(spec.prompt_len, d);
  tr.prompt_values = Matrix(spec.prompt_len, d);
  tr.decode_queries = Matrix(spec.decode_len, d);
  tr.decode_keys = Matrix(spec.decode_len, d);
  tr.decode_values = Matrix(spec.decode_len, d);

  // cluster centers: unit-norm directions around a random base
  std::vector<float> base(d);
  fill_gaussian(rng, base);
  normalize(base);
  Matrix centers(spec.n_centers, d);
  for (uint32_t c = 0; c < spec.n_centers; ++c)
    spread_direction(rng, base, spec.center_spread, centers.row(c));

  auto draw_key = [&](std::span<float> out, uint32_t* truth_out) {
    uint32_t c = uint32_t(uniform_below(rng, spec.n_centers));
    if (truth_out) *truth_out = c;
    spread_direction(rng, centers.row(c), spec.intra_spread, out);
  };

  if (prompt_truth) prompt_truth->resize(spec.prompt_len);
  for (uint32_t i = 0; i < spec.prompt_len; ++i)
    draw_key(tr.prompt_keys.row(i), prompt_truth ? &(*prompt_truth)[i] : nullptr);
  for (uint32_t i = 0; i < spec.prompt_len; ++i)
    fill_gaussian(rng, tr.prompt_values.row(i));

  // query walk: mean-reverting steps toward a periodically re-sampled center
  const float q_scale = 2.0f * std::sqrt(float(d));
  std::vector<float> u(d);
  std::copy_n(centers.row(uniform_below(rng, spec.n_centers)).data(), d, u.begin());
  uint32_t retarget_every =
      std::max<uint32_t>(1, spec.decode_len / std::max<uint32_t>(1, 2 * spec.n_centers));
  uint32_t target = 0;
  for (uint32_t t = 0; t < spec.decode_len; ++t) {
    if (t % retarget_every == 0)
      target = uint32_t(uniform_below(rng, spec.n_centers));
    if (spec.query_drift > 0.0f) {
      auto ct = centers.row(target);
      for (uint32_t i = 0; i < d; ++i)
        u[i] += spec.query_drift * (ct[i] - u[i]) +
                0.25f * spec.query_drift * float(gaussian(rng));
      normalize(std::span<float>(u));
    }
    auto q = tr.decode_queries.row(t);
    for (uint32_t i = 0; i < d; ++i) q[i] = q_scale * u[i];
  }

  if (decode_truth) decode_truth->resize(spec.decode_len);
  for (uint32_t i = 0; i < spec.decode_len; ++i)
    draw_key(tr.decode_keys.row(i), decode_truth ? &(*decode_truth)[i] : nullptr);
  for (uint32_t i = 0; i < spec.decode_len; ++i)
    fill_gaussian(rng, tr.decode_values.row(i));

  return tr;
}

}  // namespace detail

inline TraceBundle generate_synthetic(const SynthSpec& spec, SynthTruth* truth = nullptr) {
  spec.validate();
  TraceBundle bundle;
  bundle.n_layers = spec.n_layers;
  bundle.n_heads = spec.n_heads;
  bundle.traces.resize(size_t(spec.n_layers) * spec.n_heads);
  if (truth) {
    truth->prompt_clusters.resize(bundle.traces.size());
    truth->decode_clusters.resize(bundle.traces.size());
  }
  for (uint32_t l = 0; l < spec.n_layers; ++l) {
    for (uint32_t h = 0; h < spec.n_heads; ++h) {
      size_t idx = size_t(l) * spec.n_heads + h;
      uint64_t sub = mix_seed(spec.seed, l, h);
      bundle.traces[idx] = detail::generate_head(
          spec, sub, truth ? &truth->prompt_clusters[idx] : nullptr,
          truth ? &truth->decode_clusters[idx] : nullptr);
    }
  }
  bundle.metadata["generator"] = "synthetic-mixture";
  bundle.metadata["seed"] = std::to_string(spec.seed);
  bundle.metadata["n_centers"] = std::to_string(spec.n_centers);
  return bundle;
}

// ----------------------------------------------------------------------------
// CKVT binary trace format
//
// magic "CKVT", u32 version=1, u32 n_layers, n_heads, d, L, T (little endian),
// then per head (layer-major) the five matrices in declared order as
// little-endian float32 row-major, then a u32-length-prefixed UTF-8 JSON
// string holding the metadata map.
// ----------------------------------------------------------------------------

namespace detail {

constexpr char kTraceMagic[4] = {'C', 'K', 'V', 'T'};
constexpr uint32_t kTraceVersion = 1;
// total float budget guard: 2^33 floats = 32 GiB, far past desk scale
constexpr uint64_t kMaxTotalFloats = uint64_t(1) << 33;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_bytes(std::FILE* f, const void* p, size_t n, const std::string& path) {
  if (std::fwrite(p, 1, n, f) != n)
    throw IoError("write failed: " + path);
}

inline void write_u32(std::FILE* f, uint32_t v, const std::string& path) {
  write_bytes(f, &v, sizeof v, path);
}

inline void read_bytes(std::FILE* f, void* p, size_t n) {
  if (std::fread(p, 1, n, f) != n)
    throw ParseError(ParseError::Code::Truncated, "trace file: truncated payload");
}

inline uint32_t read_u32(std::FILE* f) {
  uint32_t v;
  read_bytes(f, &v, sizeof v);
  return v;
}

}  // namespace detail

inline void write_trace(const TraceBundle& bundle, const std::string& path) {
  bundle.validate();
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open for writing: " + path);

  const auto& first = bundle.traces.front();
  detail::write_bytes(f.get(), detail::kTraceMagic, 4, path);
  detail::write_u32(f.get(), detail::kTraceVersion, path);
  detail::write_u32(f.get(), bundle.n_layers, path);
  detail::write_u32(f.get(), bundle.n_heads, path);
  detail::write_u32(f.get(), first.d, path);
  detail::write_u32(f.get(), first.prompt_len, path);
  detail::write_u32(f.get(), first.decode_len, path);

  auto write_matrix = [&](const Matrix& m) {
    detail::write_bytes(f.get(), m.data.data(), m.data.size() * sizeof(float), path);
  };
  for (const auto& tr : bundle.traces) {
    write_matrix(tr.prompt_keys);
    write_matrix(tr.prompt_values);
    write_matrix(tr.decode_queries);
    write_matrix(tr.decode_keys);
    write_matrix(tr.decode_values);
  }

  nlohmann::json meta(bundle.metadata);
  std::string meta_str = meta.dump();
  if (meta_str.size() > UINT32_MAX)
    throw ValidationError("metadata too large");
  detail::write_u32(f.get(), uint32_t(meta_str.size()), path);
  detail::write_bytes(f.get(), meta_str.data(), meta_str.size(), path);

  if (std::fflush(f.get()) != 0) throw IoError("flush failed: " + path);
}

inline TraceBundle read_trace(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open for reading: " + path);

  char magic[4];
  detail::read_bytes(f.get(), magic, 4);
  if (std::memcmp(magic, detail::kTraceMagic, 4) != 0)
    throw ParseError(ParseError::Code::BadMagic, "trace file: bad magic");
  uint32_t version = detail::read_u32(f.get());
  if (version != detail::kTraceVersion)
    throw ParseError(ParseError::Code::BadVersion,
                     "trace file: unsupported version " + std::to_string(version));

  TraceBundle bundle;
  bundle.n_layers = detail::read_u32(f.get());
  bundle.n_heads = detail::read_u32(f.get());
  uint32_t d = detail::read_u32(f.get());
  uint32_t L = detail::read_u32(f.get());
  uint32_t T = detail::read_u32(f.get());

  if (bundle.n_layers == 0 || bundle.n_heads == 0 || d == 0 || L == 0)
    throw ParseError(ParseError::Code::DimOverflow,
                     "trace file: zero dimension in header");
  uint64_t heads = uint64_t(bundle.n_layers) * bundle.n_heads;
  uint64_t per_head = (uint64_t(L) * 2 + uint64_t(T) * 3) * d;
  if (heads > (uint64_t(1) << 24) || per_head > detail::kMaxTotalFloats ||
      heads * per_head > detail::kMaxTotalFloats)
    throw ParseError(ParseError::Code::DimOverflow,
                     "trace file: dimensions exceed supported size");

  bundle.traces.resize(heads);
  auto read_matrix = [&](Matrix& m, uint32_t rows) {
    m = Matrix(rows, d);
    detail::read_bytes(f.get(), m.data.data(), m.data.size() * sizeof(float));
  };
  for (auto& tr : bundle.traces) {
    tr.d = d;
    tr.prompt_len = L;
    tr.decode_len = T;
    read_matrix(tr.prompt_keys, L);
    read_matrix(tr.prompt_values, L);
    read_matrix(tr.decode_queries, T);
    read_matrix(tr.decode_keys, T);
    read_matrix(tr.decode_values, T);
  }

  uint32_t meta_len = detail::read_u32(f.get());
  std::string meta_str(meta_len, '\0');
  detail::read_bytes(f.get(), meta_str.data(), meta_len);
  try {
    nlohmann::json meta = nlohmann::json::parse(meta_str);
    bundle.metadata = meta.get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(ParseError::Code::BadMetadata, "trace file: corrupt metadata block");
  }

  char extra;
  if (std::fread(&extra, 1, 1, f.get()) == 1)
    throw ParseError(ParseError::Code::TrailingData, "trace file: trailing data");
  return bundle;
}

}  // namespace ckv
