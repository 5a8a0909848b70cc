#include "pq/prefix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace pq {

using json = nlohmann::ordered_json;

void PrefixPlan::validate() const {
  if (o < 1 || static_cast<int>(token_ids.size()) != o) {
    throw Error("prefix plan length must equal o >= 1");
  }
  if (token_ids.back() != kBosToken) throw Error("last prefixed token must be BOS");
}

PrefixPlan select_prefix(const OutlierReport& report, int o, int bos) {
  if (o < 1) throw Error("prefix size o must be >= 1");
  PrefixPlan plan;
  if (report.token_frequency.empty() || o == 1) {
    plan.token_ids = {bos};
    plan.o = 1;
    return plan;
  }
  std::vector<std::pair<int, int>> by_count(report.token_frequency.begin(),
                                            report.token_frequency.end());
  std::sort(by_count.begin(), by_count.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;  // ties to the smaller token id
  });
  const int take = std::min<int>(o - 1, static_cast<int>(by_count.size()));
  for (int i = 0; i < take; ++i) plan.token_ids.push_back(by_count[static_cast<size_t>(i)].first);
  plan.token_ids.push_back(bos);
  plan.o = static_cast<int>(plan.token_ids.size());
  return plan;
}

PrefixCache build_prefix_cache(const ToyModel& model, const PrefixPlan& plan) {
  plan.validate();
  if (plan.o > model.config.max_seq) throw Error("prefix plan exceeds max_seq");
  PrefixCache cache;
  cache.plan = plan;
  KvCache kv;
  ForwardOptions opts;
  opts.cache = &kv;  // FP32, unhooked, no prior prefix
  forward(model, plan.token_ids, opts);
  cache.keys = std::move(kv.keys);
  cache.values = std::move(kv.values);
  cache.fingerprint = model.fingerprint();
  return cache;
}

Tensor attention_with_prefix(const Tensor& q, const Tensor& k, const Tensor& v,
                             const Tensor& k_prime, const Tensor& v_prime) {
  if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3) {
    throw Error("attention expects [T x H x D] tensors");
  }
  const int t = q.dim(0), nh = q.dim(1), d = q.dim(2);
  const int s = k.dim(0);
  if (k.dim(1) != nh || k.dim(2) != d || !v.same_shape(k) || s < t) {
    throw Error("attention K/V shape mismatch: Q " + shape_to_string(q.shape()) + ", K " +
                shape_to_string(k.shape()));
  }
  int o = 0;
  if (!k_prime.empty()) {
    if (k_prime.ndim() != 3 || k_prime.dim(1) != nh || k_prime.dim(2) != d ||
        !v_prime.same_shape(k_prime)) {
      throw Error("prefix k'/v' shape mismatch: " + shape_to_string(k_prime.shape()));
    }
    o = k_prime.dim(0);
  }
  const int total = o + s;
  const float inv_sqrt_d = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d)));

  auto head_slice = [](const Tensor& x, int h) {
    const int rows = x.dim(0), heads = x.dim(1), dim = x.dim(2);
    Tensor out({rows, dim});
    for (int i = 0; i < rows; ++i) {
      std::memcpy(&out(i, 0), x.data() + (static_cast<int64_t>(i) * heads + h) * dim,
                  static_cast<size_t>(dim) * sizeof(float));
    }
    return out;
  };

  Tensor out({t, nh, d});
  for (int h = 0; h < nh; ++h) {
    const Tensor qh = head_slice(q, h);
    Tensor kh({total, d});
    Tensor vh({total, d});
    if (o > 0) {
      const Tensor kp = head_slice(k_prime, h);
      const Tensor vp = head_slice(v_prime, h);
      std::memcpy(kh.data(), kp.data(), static_cast<size_t>(kp.size()) * sizeof(float));
      std::memcpy(vh.data(), vp.data(), static_cast<size_t>(vp.size()) * sizeof(float));
    }
    const Tensor kr = head_slice(k, h);
    const Tensor vr = head_slice(v, h);
    std::memcpy(kh.data() + static_cast<int64_t>(o) * d, kr.data(),
                static_cast<size_t>(kr.size()) * sizeof(float));
    std::memcpy(vh.data() + static_cast<int64_t>(o) * d, vr.data(),
                static_cast<size_t>(vr.size()) * sizeof(float));

    Tensor scores = scale(matmul(qh, transpose2d(kh)), inv_sqrt_d);
    // prefix columns [0, o) stay visible to every query; real positions are
    // causal, query row i sitting at real index s - t + i
    for (int i = 0; i < t; ++i) {
      const int last_visible = o + (s - t + i);
      for (int j = last_visible + 1; j < total; ++j) scores(i, j) = -1e30f;
    }
    const Tensor probs = softmax_rows(scores);
    const Tensor oh = matmul(probs, vh);
    for (int i = 0; i < t; ++i) {
      std::memcpy(out.data() + (static_cast<int64_t>(i) * nh + h) * d, &oh(i, 0),
                  static_cast<size_t>(d) * sizeof(float));
    }
  }
  return out;
}

IsolationReport verify_isolation(const ToyModel& model, const PrefixPlan& plan,
                                 const std::vector<std::vector<int>>& calib_sequences,
                                 const OutlierThresholds& th) {
  th.validate();
  const PrefixCache cache = build_prefix_cache(model, plan);
  IsolationReport rep;
  const int nl = model.config.n_layers;
  for (const auto& seq : calib_sequences) {
    // without prefix
    {
      ActivationCapture cap;
      cap.want_block_output = true;
      ForwardOptions opts;
      opts.capture = &cap;
      forward(model, seq, opts);
      for (int l = 0; l < nl; ++l) {
        const OutlierClassification c =
            classify_outliers(token_maxima(cap.block_output[static_cast<size_t>(l)]), th);
        for (int i = 0; i < c.ratios.dim(0); ++i) {
          rep.max_ratio_without = std::max<double>(rep.max_ratio_without, c.ratios[i]);
        }
      }
    }
    // with prefix active; every captured row is a non-prefix position
    {
      ActivationCapture cap;
      cap.want_block_output = true;
      ForwardOptions opts;
      opts.capture = &cap;
      opts.prefix = &cache;
      forward(model, seq, opts);
      for (int l = 0; l < nl; ++l) {
        const OutlierClassification c =
            classify_outliers(token_maxima(cap.block_output[static_cast<size_t>(l)]), th);
        rep.residual_upper_count += static_cast<int>(c.upper.size());
        for (int i = 0; i < c.ratios.dim(0); ++i) {
          rep.max_ratio_with = std::max<double>(rep.max_ratio_with, c.ratios[i]);
        }
      }
    }
  }
  return rep;
}

// ---- prefix cache I/O --------------------------------------------------------

namespace {
constexpr char kPrefixMagic[4] = {'P', 'Q', 'P', 'C'};
constexpr uint32_t kPrefixVersion = 1;
}  // namespace

void save_prefix_cache(const PrefixCache& cache, const std::string& path) {
  cache.plan.validate();
  json header;
  header["plan"] = cache.plan.token_ids;
  header["o"] = cache.plan.o;
  header["fingerprint"] = cache.fingerprint;
  json shapes = json::array();
  for (const auto& t : cache.keys) shapes.push_back(t.shape());
  header["layer_shapes"] = std::move(shapes);
  const std::string hdr = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path + " for writing");
  f.write(kPrefixMagic, 4);
  uint32_t ver = kPrefixVersion;
  f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  uint64_t hlen = hdr.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  for (const auto* layer : {&cache.keys, &cache.values}) {
    for (const Tensor& t : *layer) {
      f.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
  }
  if (!f) throw Error("write failed for " + path);
}

PrefixCache load_prefix_cache(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open prefix cache file: " + path);
  char magic[4];
  uint32_t ver = 0;
  uint64_t hlen = 0;
  if (!f.read(magic, 4) || std::memcmp(magic, kPrefixMagic, 4) != 0) {
    throw Error("bad magic in " + path + ": not a prefix cache");
  }
  f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (ver != kPrefixVersion) throw Error("unsupported prefix cache version");
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hdr(hlen, '\0');
  if (!f.read(hdr.data(), static_cast<std::streamsize>(hlen))) {
    throw Error("truncated prefix cache header");
  }
  json header;
  try {
    header = json::parse(hdr);
  } catch (const std::exception& e) {
    throw Error(std::string("bad prefix cache header JSON: ") + e.what());
  }
  PrefixCache cache;
  cache.plan.token_ids = header.at("plan").get<std::vector<int>>();
  cache.plan.o = header.at("o").get<int>();
  cache.fingerprint = header.at("fingerprint").get<uint64_t>();
  cache.plan.validate();
  const auto shapes = header.at("layer_shapes").get<std::vector<std::vector<int>>>();
  for (const auto* dst : {&cache.keys, &cache.values}) {
    auto& vecs = *const_cast<std::vector<Tensor>*>(dst);
    for (const auto& shape : shapes) {
      Tensor t(shape);
      if (!f.read(reinterpret_cast<char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(float)))) {
        throw Error("truncated prefix cache payload in " + path);
      }
      t.check_finite("prefix cache tensor from " + path);
      vecs.push_back(std::move(t));
    }
  }
  return cache;
}

}  // namespace pq
