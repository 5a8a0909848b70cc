#include "pq/autodiff.hpp"

#include <cmath>
#include <cstring>

#include "pq/model.hpp"
#include "pq/prefix.hpp"

namespace pq {

namespace {

void accumulate(Tensor& dst, const Tensor& src) {
  if (dst.size() != src.size()) throw Error("gradient size mismatch");
  for (int64_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Tensor head_slice(const Tensor& x, int h) {
  const int rows = x.dim(0), heads = x.dim(1), dim = x.dim(2);
  Tensor out({rows, dim});
  for (int i = 0; i < rows; ++i) {
    std::memcpy(&out(i, 0), x.data() + (static_cast<int64_t>(i) * heads + h) * dim,
                static_cast<size_t>(dim) * sizeof(float));
  }
  return out;
}

}  // namespace

Var Tape::record(Tensor val, std::function<void(TapeNode&)> back) {
  auto node = std::make_shared<TapeNode>();
  node->val = std::move(val);
  node->back = std::move(back);
  nodes_.push_back(node);
  return node;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Var v = record(std::move(value), {});
  v->requires_grad = requires_grad;
  return v;
}

void Tape::backward(const Var& root) {
  if (root->val.size() != 1) throw Error("backward needs a scalar root");
  root->grad_buf()[0] += 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    TapeNode& n = **it;
    if (n.back && !n.grad.empty()) n.back(n);
  }
}

Var Tape::matmul(Var a, Var b) {
  Tensor out = pq::matmul(a->val, b->val);
  return record(std::move(out), [a, b](TapeNode& n) {
    accumulate(a->grad_buf(), pq::matmul(n.grad, transpose2d(b->val)));
    accumulate(b->grad_buf(), pq::matmul(transpose2d(a->val), n.grad));
  });
}

Var Tape::add(Var a, Var b) {
  return record(pq::add(a->val, b->val), [a, b](TapeNode& n) {
    accumulate(a->grad_buf(), n.grad);
    accumulate(b->grad_buf(), n.grad);
  });
}

Var Tape::mul(Var a, Var b) {
  return record(pq::mul(a->val, b->val), [a, b](TapeNode& n) {
    accumulate(a->grad_buf(), pq::mul(n.grad, b->val));
    accumulate(b->grad_buf(), pq::mul(n.grad, a->val));
  });
}

Var Tape::scale(Var x, float c) {
  return record(pq::scale(x->val, c), [x, c](TapeNode& n) {
    accumulate(x->grad_buf(), pq::scale(n.grad, c));
  });
}

Var Tape::silu(Var x) {
  return record(pq::silu(x->val), [x](TapeNode& n) {
    Tensor& gx = x->grad_buf();
    for (int64_t i = 0; i < n.grad.size(); ++i) {
      const double v = x->val[i];
      const double sig = 1.0 / (1.0 + std::exp(-v));
      gx[i] += static_cast<float>(static_cast<double>(n.grad[i]) * sig * (1.0 + v * (1.0 - sig)));
    }
  });
}

Var Tape::rmsnorm(Var x, Var gain, float eps) {
  return record(pq::rmsnorm(x->val, gain->val, eps), [x, gain, eps](TapeNode& n) {
    const int t = x->val.dim(0), c = x->val.dim(1);
    Tensor& gx = x->grad_buf();
    Tensor& gg = gain->grad_buf();
    for (int i = 0; i < t; ++i) {
      double ss = 0.0;
      for (int j = 0; j < c; ++j) ss += static_cast<double>(x->val(i, j)) * x->val(i, j);
      const double inv = 1.0 / std::sqrt(ss / c + static_cast<double>(eps));
      double dot = 0.0;  // sum_j dy_j * g_j * x_j
      for (int j = 0; j < c; ++j) {
        dot += static_cast<double>(n.grad(i, j)) * gain->val[j] * x->val(i, j);
      }
      for (int j = 0; j < c; ++j) {
        const double dy = n.grad(i, j);
        gx(i, j) += static_cast<float>(dy * gain->val[j] * inv -
                                       x->val(i, j) * inv * inv * inv * dot / c);
        gg[j] += static_cast<float>(dy * x->val(i, j) * inv);
      }
    }
  });
}

Var Tape::reshape(Var x, std::vector<int> shape) {
  return record(x->val.reshape(shape),
                [x](TapeNode& n) { accumulate(x->grad_buf(), n.grad); });
}

Var Tape::rope_heads(Var x, int pos0, float theta) {
  return record(pq::rope_heads(x->val, pos0, theta), [x, pos0, theta](TapeNode& n) {
    const int t = x->val.dim(0), nh = x->val.dim(1), d = x->val.dim(2);
    Tensor& gx = x->grad_buf();
    for (int i = 0; i < t; ++i) {
      const int pos = pos0 + i;
      for (int h = 0; h < nh; ++h) {
        for (int p = 0; p < d / 2; ++p) {
          const double freq = std::pow(static_cast<double>(theta), -2.0 * p / d);
          const double ang = pos * freq;
          const double c = std::cos(ang), s = std::sin(ang);
          const double ga = n.grad(i, h, 2 * p), gb = n.grad(i, h, 2 * p + 1);
          gx(i, h, 2 * p) += static_cast<float>(ga * c + gb * s);
          gx(i, h, 2 * p + 1) += static_cast<float>(-ga * s + gb * c);
        }
      }
    }
  });
}

Var Tape::online_rotate(Var x, HadamardSpec spec) {
  return record(pq::online_rotate(x->val, spec), [x, spec](TapeNode& n) {
    accumulate(x->grad_buf(), online_rotate_inverse(n.grad, spec));
  });
}

Var Tape::attention(Var q, Var k, Var v, Tensor prefix_k, Tensor prefix_v) {
  Tensor out = attention_with_prefix(q->val, k->val, v->val, prefix_k, prefix_v);
  return record(std::move(out), [q, k, v, prefix_k, prefix_v](TapeNode& n) {
    const int t = q->val.dim(0), nh = q->val.dim(1), d = q->val.dim(2);
    const int s = k->val.dim(0);
    const int o = prefix_k.empty() ? 0 : prefix_k.dim(0);
    const int total = o + s;
    const float inv_sqrt_d = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d)));
    Tensor& gq = q->grad_buf();
    Tensor& gk = k->grad_buf();
    Tensor& gv = v->grad_buf();
    for (int h = 0; h < nh; ++h) {
      const Tensor qh = head_slice(q->val, h);
      Tensor kh({total, d}), vh({total, d});
      if (o > 0) {
        const Tensor kp = head_slice(prefix_k, h), vp = head_slice(prefix_v, h);
        std::memcpy(kh.data(), kp.data(), static_cast<size_t>(kp.size()) * sizeof(float));
        std::memcpy(vh.data(), vp.data(), static_cast<size_t>(vp.size()) * sizeof(float));
      }
      const Tensor kr = head_slice(k->val, h), vr = head_slice(v->val, h);
      std::memcpy(kh.data() + static_cast<int64_t>(o) * d, kr.data(),
                  static_cast<size_t>(kr.size()) * sizeof(float));
      std::memcpy(vh.data() + static_cast<int64_t>(o) * d, vr.data(),
                  static_cast<size_t>(vr.size()) * sizeof(float));

      Tensor scores = pq::scale(pq::matmul(qh, transpose2d(kh)), inv_sqrt_d);
      for (int i = 0; i < t; ++i) {
        const int last_visible = o + (s - t + i);
        for (int j = last_visible + 1; j < total; ++j) scores(i, j) = -1e30f;
      }
      const Tensor probs = softmax_rows(scores);

      Tensor gout_h({t, d});
      for (int i = 0; i < t; ++i) {
        std::memcpy(&gout_h(i, 0), n.grad.data() + (static_cast<int64_t>(i) * nh + h) * d,
                    static_cast<size_t>(d) * sizeof(float));
      }
      const Tensor dprobs = pq::matmul(gout_h, transpose2d(vh));
      const Tensor dvh = pq::matmul(transpose2d(probs), gout_h);
      // softmax rows: ds = p * (dp - sum(p * dp)); masked columns have p = 0
      Tensor dscores({t, total});
      for (int i = 0; i < t; ++i) {
        double dot = 0.0;
        for (int j = 0; j < total; ++j) {
          dot += static_cast<double>(probs(i, j)) * dprobs(i, j);
        }
        for (int j = 0; j < total; ++j) {
          dscores(i, j) =
              static_cast<float>(probs(i, j) * (static_cast<double>(dprobs(i, j)) - dot));
        }
      }
      const Tensor dqh = pq::scale(pq::matmul(dscores, kh), inv_sqrt_d);
      const Tensor dkh = pq::scale(pq::matmul(transpose2d(dscores), qh), inv_sqrt_d);
      for (int i = 0; i < t; ++i) {
        for (int j = 0; j < d; ++j) gq(i, h, j) += dqh(i, j);
      }
      for (int i = 0; i < s; ++i) {  // prefix rows carry no gradient
        for (int j = 0; j < d; ++j) {
          gk(i, h, j) += dkh(o + i, j);
          gv(i, h, j) += dvh(o + i, j);
        }
      }
    }
  });
}

Var Tape::fake_quant_dynamic(Var x, Var gamma, Var beta, QuantSpec spec) {
  const float g = gamma->val[0], b = beta->val[0];
  QuantParams p = fit_params(x->val, spec, g, b);
  Tensor out = fake_quant(x->val, p, spec);
  return record(std::move(out), [x, gamma, beta, spec, p](TapeNode& n) {
    const int64_t ng = p.scale.size();
    const double qmax = spec.qmax();
    std::vector<double> grad_s(static_cast<size_t>(ng), 0.0);
    std::vector<double> mn(static_cast<size_t>(ng), 1e300), mx(static_cast<size_t>(ng), -1e300);
    Tensor& gx = x->grad_buf();
    for (int64_t i = 0; i < x->val.size(); ++i) {
      const int64_t grp = quant_group_of(spec, x->val.shape(), i);
      const double v = x->val[i];
      mn[grp] = std::min(mn[grp], v);
      mx[grp] = std::max(mx[grp], v);
      const double s = p.scale[grp], z = p.zero[grp];
      const double q_pre = std::nearbyint(v / s) + z;
      const double q = std::min(qmax, std::max(0.0, q_pre));
      const double go = n.grad[i];
      if (q_pre >= 0.0 && q_pre <= qmax) gx[i] += static_cast<float>(go);
      grad_s[static_cast<size_t>(grp)] += go * (q - z);
    }
    double dgamma = 0.0, dbeta = 0.0;
    for (int64_t grp = 0; grp < ng; ++grp) {
      // groups where the 1e-8 scale guard fired have no clipping gradient
      if (spec.symmetric) {
        const double amax = std::max(std::abs(mx[grp]), std::abs(mn[grp]));
        if (2.0 * amax * gamma->val[0] / qmax < 1e-8) continue;
        dgamma += grad_s[static_cast<size_t>(grp)] * 2.0 * amax / qmax;
      } else {
        const double raw =
            (gamma->val[0] * mx[grp] - beta->val[0] * mn[grp]) / qmax;
        if (mx[grp] == mn[grp] || raw < 1e-8) continue;
        dgamma += grad_s[static_cast<size_t>(grp)] * mx[grp] / qmax;
        dbeta += grad_s[static_cast<size_t>(grp)] * (-mn[grp]) / qmax;
      }
    }
    gamma->grad_buf()[0] += static_cast<float>(dgamma);
    beta->grad_buf()[0] += static_cast<float>(dbeta);
  });
}

Var Tape::fake_quant_static(Var x, Var scale, Var zero, QuantSpec spec) {
  const int64_t ng = quant_group_count(spec, x->val.shape());
  if (scale->val.size() != ng || zero->val.size() != ng) {
    throw Error("static quant params have the wrong group count");
  }
  const double qmax = spec.qmax();
  Tensor out(x->val.shape());
  for (int64_t i = 0; i < x->val.size(); ++i) {
    const int64_t grp = quant_group_of(spec, x->val.shape(), i);
    const double s = scale->val[grp], z = zero->val[grp];
    double q = std::nearbyint(static_cast<double>(x->val[i]) / s) + z;
    q = std::min(qmax, std::max(0.0, q));
    out[i] = static_cast<float>(s * (q - z));
  }
  return record(std::move(out), [x, scale, zero, spec, qmax](TapeNode& n) {
    Tensor& gx = x->grad_buf();
    Tensor& gs = scale->grad_buf();
    Tensor& gz = zero->grad_buf();
    for (int64_t i = 0; i < x->val.size(); ++i) {
      const int64_t grp = quant_group_of(spec, x->val.shape(), i);
      const double s = scale->val[grp], z = zero->val[grp];
      const double q_pre = std::nearbyint(static_cast<double>(x->val[i]) / s) + z;
      const double q = std::min(qmax, std::max(0.0, q_pre));
      const double go = n.grad[i];
      if (q_pre >= 0.0 && q_pre <= qmax) {
        gx[i] += static_cast<float>(go);
      } else {
        gz[grp] += static_cast<float>(go * (-s));
      }
      gs[grp] += static_cast<float>(go * (q - z));
    }
  });
}

Var Tape::mse_loss(Var x, Tensor target) {
  if (x->val.size() != target.size()) throw Error("mse_loss size mismatch");
  Tensor out({1});
  out[0] = static_cast<float>(mse(x->val, target));
  return record(std::move(out), [x, target](TapeNode& n) {
    const double go = n.grad[0];
    const double inv_n = 1.0 / static_cast<double>(x->val.size());
    Tensor& gx = x->grad_buf();
    for (int64_t i = 0; i < x->val.size(); ++i) {
      gx[i] += static_cast<float>(go * 2.0 * (static_cast<double>(x->val[i]) - target[i]) * inv_n);
    }
  });
}

}  // namespace pq
