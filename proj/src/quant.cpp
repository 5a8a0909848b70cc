#include "pq/quant.hpp"

#include <cmath>
#include <limits>

namespace pq {

const char* granularity_name(Granularity g) {
  switch (g) {
    case Granularity::PerTensor: return "per_tensor";
    case Granularity::PerToken: return "per_token";
    case Granularity::PerChannel: return "per_channel";
    case Granularity::Group: return "group";
    case Granularity::PerHead: return "per_head";
  }
  return "?";
}

Granularity granularity_from_name(const std::string& name) {
  if (name == "per_tensor") return Granularity::PerTensor;
  if (name == "per_token") return Granularity::PerToken;
  if (name == "per_channel") return Granularity::PerChannel;
  if (name == "group") return Granularity::Group;
  if (name == "per_head") return Granularity::PerHead;
  throw Error("unknown granularity: " + name);
}

int64_t quant_group_count(const QuantSpec& spec, const std::vector<int>& shape) {
  const int nd = static_cast<int>(shape.size());
  switch (spec.gran) {
    case Granularity::PerTensor:
      return 1;
    case Granularity::PerToken:
      if (nd != 2 && nd != 3) {
        throw Error("per_token needs [TxC] or [TxHxD], got " + shape_to_string(shape));
      }
      return shape[0];
    case Granularity::PerChannel:
      if (nd != 2) throw Error("per_channel needs [in x out], got " + shape_to_string(shape));
      return shape[1];
    case Granularity::Group: {
      if (spec.group_size <= 0) throw Error("group size must be positive");
      if (nd == 2) {
        if (shape[0] % spec.group_size != 0) {
          throw Error("group size " + std::to_string(spec.group_size) +
                      " does not divide axis extent " + std::to_string(shape[0]));
        }
        return static_cast<int64_t>(shape[1]) * (shape[0] / spec.group_size);
      }
      if (nd == 3) {
        if (shape[2] % spec.group_size != 0) {
          throw Error("group size " + std::to_string(spec.group_size) +
                      " does not divide axis extent " + std::to_string(shape[2]));
        }
        return static_cast<int64_t>(shape[0]) * shape[1] * (shape[2] / spec.group_size);
      }
      throw Error("group granularity needs rank 2 or 3, got " + shape_to_string(shape));
    }
    case Granularity::PerHead:
      if (nd != 3) throw Error("per_head needs [TxHxD], got " + shape_to_string(shape));
      return shape[1];
  }
  throw Error("bad granularity");
}

int64_t quant_group_of(const QuantSpec& spec, const std::vector<int>& shape, int64_t idx) {
  const int nd = static_cast<int>(shape.size());
  switch (spec.gran) {
    case Granularity::PerTensor:
      return 0;
    case Granularity::PerToken: {
      int64_t row_len = 1;
      for (int i = 1; i < nd; ++i) row_len *= shape[i];
      return idx / row_len;
    }
    case Granularity::PerChannel:
      return idx % shape[1];
    case Granularity::Group: {
      if (nd == 2) {
        const int64_t row = idx / shape[1], col = idx % shape[1];
        return col * (shape[0] / spec.group_size) + row / spec.group_size;
      }
      const int64_t d = idx % shape[2];
      const int64_t th = idx / shape[2];  // combined (token, head) index
      return th * (shape[2] / spec.group_size) + d / spec.group_size;
    }
    case Granularity::PerHead:
      return (idx / shape[2]) % shape[1];
  }
  throw Error("bad granularity");
}

QuantParams fit_params(const Tensor& x, const QuantSpec& spec, float gamma, float beta) {
  if (gamma < 0.0f || gamma > 1.0f || beta < 0.0f || beta > 1.0f) {
    throw Error("clipping factors must lie in [0,1]");
  }
  const int64_t ng = quant_group_count(spec, x.shape());
  std::vector<double> mn(static_cast<size_t>(ng), std::numeric_limits<double>::infinity());
  std::vector<double> mx(static_cast<size_t>(ng), -std::numeric_limits<double>::infinity());
  for (int64_t i = 0; i < x.size(); ++i) {
    const int64_t g = quant_group_of(spec, x.shape(), i);
    const double v = x[i];
    if (v < mn[g]) mn[g] = v;
    if (v > mx[g]) mx[g] = v;
  }
  const double qmax = spec.qmax();
  QuantParams p;
  p.gamma = gamma;
  p.beta = beta;
  p.scale = Tensor({static_cast<int>(ng)});
  p.zero = Tensor({static_cast<int>(ng)});
  for (int64_t g = 0; g < ng; ++g) {
    double s, z;
    if (spec.symmetric) {
      const double amax = std::max(std::abs(mx[g]), std::abs(mn[g])) * gamma;
      s = 2.0 * amax / qmax;
      z = std::nearbyint(qmax / 2.0);
    } else {
      s = (gamma * mx[g] - beta * mn[g]) / qmax;
      if (mx[g] == mn[g] || s < 1e-8) s = 1e-8;
      z = -std::floor(beta * mn[g] / s);
    }
    if (mx[g] == mn[g] || s < 1e-8) s = 1e-8;
    z = std::min(qmax, std::max(0.0, z));
    p.scale[g] = static_cast<float>(s);
    p.zero[g] = static_cast<float>(z);
  }
  return p;
}

Tensor fake_quant(const Tensor& x, const QuantParams& params, const QuantSpec& spec) {
  const int64_t ng = quant_group_count(spec, x.shape());
  if (params.scale.size() != ng || params.zero.size() != ng) {
    throw Error("quant params have " + std::to_string(params.scale.size()) +
                " groups, spec induces " + std::to_string(ng) + " on " +
                shape_to_string(x.shape()));
  }
  const double qmax = spec.qmax();
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) {
    const int64_t g = quant_group_of(spec, x.shape(), i);
    const double s = params.scale[g];
    const double z = params.zero[g];
    double q = std::nearbyint(static_cast<double>(x[i]) / s) + z;
    q = std::min(qmax, std::max(0.0, q));
    out[i] = static_cast<float>(s * (q - z));
  }
  return out;
}

double quant_error(const Tensor& x_ref_out, const Tensor& x_q_out) {
  return mse(x_ref_out, x_q_out);
}

Tensor dynamic_quantize_site(const Tensor& x, const QuantSpec& spec, float gamma, float beta) {
  return fake_quant(x, fit_params(x, spec, gamma, beta), spec);
}

}  // namespace pq
