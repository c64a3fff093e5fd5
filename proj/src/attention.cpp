// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtcap/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "mtcap/init.hpp"

namespace mtcap {

std::string_view role_name(AttentionRole role) {
  switch (role) {
    case AttentionRole::kEncoderSelf:
      return "enc-SA";
    case AttentionRole::kDecoderSelf:
      return "dec-SA";
    case AttentionRole::kDecoderGuided:
      return "dec-GA";
    case AttentionRole::kMultiViewGuided:
      return "umv-GA";
  }
  return "unknown";
}

std::optional<AttentionRole> parse_role(std::string_view name) {
  for (auto r : {AttentionRole::kEncoderSelf, AttentionRole::kDecoderSelf, AttentionRole::kDecoderGuided,
                 AttentionRole::kMultiViewGuided}) {
    if (role_name(r) == name) {
      return r;
    }
  }
  return std::nullopt;
}

std::string attention_record_json(const AttentionRecord& record) {
  nlohmann::ordered_json j;
  j["role"] = std::string(role_name(record.role));
  j["block"] = record.block;
  j["head"] = record.head;
  j["shape"] = {record.weights.rows(), record.weights.cols()};
  auto& w = j["weights"] = nlohmann::ordered_json::array();
  for (double v : record.weights.values()) {
    w.push_back(std::round(v * 1e6) / 1e6);
  }
  return j.dump();
}

namespace {

template <typename T>
struct AttentionSaved {
  std::vector<T> probs;         // batch * heads * queries * keys, pre-dropout
  std::vector<T> dropout_mask;  // same layout, empty when dropout is inactive
};

}  // namespace

template <typename T>
Var<T> attention_core(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionLayout<T>& layout) {
  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  const std::size_t nb = layout.batch;
  const std::size_t nq = layout.queries;
  const std::size_t nk = layout.keys;
  const std::size_t nh = layout.heads;
  require(nb > 0 && nq > 0 && nk > 0 && nh > 0, ErrorCode::kDimension, "attention: empty layout");
  require(qv.rows() == nb * nq && kv.rows() == nb * nk && vv.rows() == nb * nk, ErrorCode::kDimension,
          "attention: rows " + shape_string(qv) + ", " + shape_string(kv) + ", " + shape_string(vv) +
              " do not match batch " + std::to_string(nb) + " x (" + std::to_string(nq) + " queries, " +
              std::to_string(nk) + " keys)");
  require(qv.cols() == kv.cols() && kv.cols() == vv.cols(), ErrorCode::kDimension,
          "attention: Q, K, V widths differ: " + shape_string(qv) + ", " + shape_string(kv) + ", " +
              shape_string(vv));
  require(qv.cols() % nh == 0, ErrorCode::kDimension,
          "attention: width " + std::to_string(qv.cols()) + " not divisible by " + std::to_string(nh) + " heads");
  if (layout.key_valid != nullptr) {
    require(layout.key_valid->size() == nb * nk, ErrorCode::kDimension, "attention: key mask length mismatch");
  }
  if (layout.additive_mask != nullptr) {
    require(layout.additive_mask->rows() == nq && layout.additive_mask->cols() == nk, ErrorCode::kDimension,
            "attention: mask " + shape_string(*layout.additive_mask) + " does not match " + std::to_string(nq) +
                "x" + std::to_string(nk));
  }
  require(layout.dropout >= 0.0 && layout.dropout < 1.0, ErrorCode::kConfig, "attention dropout outside [0, 1)");
  if (layout.causal) {
    require(nq <= nk, ErrorCode::kDimension, "causal attention needs queries <= keys");
  }

  Tape<T>& tape = q.tape();
  const std::size_t dh = qv.cols() / nh;
  const std::size_t width = qv.cols();
  const T scale = static_cast<T>(layout.scale);
  const T mask_value = static_cast<T>(kMaskValue);
  const bool use_dropout = tape.training() && layout.dropout > 0.0;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - layout.dropout));

  AttentionSaved<T> saved;
  saved.probs.assign(nb * nh * nq * nk, T(0));
  if (use_dropout) {
    saved.dropout_mask.assign(saved.probs.size(), T(0));
  }
  Tensor<T> out(nb * nq, width);
  std::vector<T> scores(nk);
  std::vector<std::uint32_t> order(nk);

  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t h = 0; h < nh; ++h) {
      const std::size_t col0 = h * dh;
      T* probs_block = saved.probs.data() + ((b * nh + h) * nq) * nk;
      for (std::size_t i = 0; i < nq; ++i) {
        const T* qrow = qv.data() + (b * nq + i) * width + col0;
        bool any_open = false;
        for (std::size_t j = 0; j < nk; ++j) {
          const T* krow = kv.data() + (b * nk + j) * width + col0;
          T s = T(0);
          for (std::size_t c = 0; c < dh; ++c) {
            s += qrow[c] * krow[c];
          }
          s *= scale;
          bool masked = false;
          if (layout.additive_mask != nullptr) {
            const T m = (*layout.additive_mask)(i, j);
            masked = is_masked(static_cast<double>(m));
            s += m;
          }
          if ((layout.causal && j > i) || (layout.key_valid != nullptr && (*layout.key_valid)[b * nk + j] == 0)) {
            if (!masked) {
              s += mask_value;
            }
            masked = true;
          }
          any_open = any_open || !masked;
          scores[j] = s;
        }
        require(any_open, ErrorCode::kNumeric,
                "degenerate attention row: query " + std::to_string(i) + " of batch element " + std::to_string(b) +
                    " has every key masked");

        // Canonical summation order: by score, then by value row.
        std::iota(order.begin(), order.end(), 0U);
        std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t c) {
          if (scores[a] != scores[c]) {
            return scores[a] < scores[c];
          }
          const T* va = vv.data() + (b * nk + a) * width + col0;
          const T* vc = vv.data() + (b * nk + c) * width + col0;
          return std::lexicographical_compare(va, va + dh, vc, vc + dh);
        });
        const T mx = scores[order[nk - 1]];
        T* prow = probs_block + i * nk;
        T denom = T(0);
        for (std::uint32_t j : order) {
          prow[j] = std::exp(scores[j] - mx);
          denom += prow[j];
        }
        for (std::size_t j = 0; j < nk; ++j) {
          prow[j] /= denom;
        }
        T* orow = out.data() + (b * nq + i) * width + col0;
        T* drow = use_dropout ? saved.dropout_mask.data() + ((b * nh + h) * nq + i) * nk : nullptr;
        if (drow != nullptr) {
          for (std::size_t j = 0; j < nk; ++j) {
            drow[j] = tape.rng().uniform() < layout.dropout ? T(0) : keep_scale;
          }
        }
        for (std::uint32_t j : order) {
          const T p = drow != nullptr ? prow[j] * drow[j] : prow[j];
          const T* vrow = vv.data() + (b * nk + j) * width + col0;
          for (std::size_t c = 0; c < dh; ++c) {
            orow[c] += p * vrow[c];
          }
        }
      }
      if (layout.recorder != nullptr && layout.recorder->example == b) {
        AttentionRecord rec;
        rec.role = layout.role;
        rec.block = layout.block;
        rec.head = static_cast<int>(h);
        rec.weights = Tensor<double>(nq, nk);
        for (std::size_t x = 0; x < nq * nk; ++x) {
          rec.weights[x] = static_cast<double>(probs_block[x]);
        }
        layout.recorder->records.push_back(std::move(rec));
      }
    }
  }

  const auto iq = q.id();
  const auto ik = k.id();
  const auto iv = v.id();
  const bool needs = tape.requires_grad(iq) || tape.requires_grad(ik) || tape.requires_grad(iv);
  return tape.push(
      std::move(out), needs,
      [iq, ik, iv, nb, nq, nk, nh, dh, width, scale, saved = std::move(saved)](Tape<T>& tp, std::uint32_t self) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& qv2 = tp.value(iq);
        const Tensor<T>& kv2 = tp.value(ik);
        const Tensor<T>& vv2 = tp.value(iv);
        const bool gq = tp.requires_grad(iq);
        const bool gk = tp.requires_grad(ik);
        const bool gv = tp.requires_grad(iv);
        Tensor<T>* dq = gq ? &tp.grad_buffer(iq) : nullptr;
        Tensor<T>* dk = gk ? &tp.grad_buffer(ik) : nullptr;
        Tensor<T>* dv = gv ? &tp.grad_buffer(iv) : nullptr;
        const bool has_dropout = !saved.dropout_mask.empty();
        std::vector<T> dprob(nk);
        for (std::size_t b = 0; b < nb; ++b) {
          for (std::size_t h = 0; h < nh; ++h) {
            const std::size_t col0 = h * dh;
            const T* probs_block = saved.probs.data() + ((b * nh + h) * nq) * nk;
            for (std::size_t i = 0; i < nq; ++i) {
              const T* prow = probs_block + i * nk;
              const T* drow = has_dropout ? saved.dropout_mask.data() + ((b * nh + h) * nq + i) * nk : nullptr;
              const T* grow = g.data() + (b * nq + i) * width + col0;
              T dot = T(0);
              for (std::size_t j = 0; j < nk; ++j) {
                const T* vrow = vv2.data() + (b * nk + j) * width + col0;
                const T dm = drow != nullptr ? drow[j] : T(1);
                T dp = T(0);
                for (std::size_t c = 0; c < dh; ++c) {
                  dp += grow[c] * vrow[c];
                }
                dprob[j] = dp * dm;
                dot += prow[j] * dprob[j];
                if (dv != nullptr) {
                  const T w = prow[j] * dm;
                  T* dvrow = dv->data() + (b * nk + j) * width + col0;
                  for (std::size_t c = 0; c < dh; ++c) {
                    dvrow[c] += w * grow[c];
                  }
                }
              }
              if (dq == nullptr && dk == nullptr) {
                continue;
              }
              const T* qrow = qv2.data() + (b * nq + i) * width + col0;
              T* dqrow = dq != nullptr ? dq->data() + (b * nq + i) * width + col0 : nullptr;
              for (std::size_t j = 0; j < nk; ++j) {
                const T ds = prow[j] * (dprob[j] - dot) * scale;
                if (ds == T(0)) {
                  continue;
                }
                const T* krow = kv2.data() + (b * nk + j) * width + col0;
                if (dqrow != nullptr) {
                  for (std::size_t c = 0; c < dh; ++c) {
                    dqrow[c] += ds * krow[c];
                  }
                }
                if (dk != nullptr) {
                  T* dkrow = dk->data() + (b * nk + j) * width + col0;
                  for (std::size_t c = 0; c < dh; ++c) {
                    dkrow[c] += ds * qrow[c];
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
SdpaResult<T> sdpa(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Tensor<T>* mask) {
  require(q.cols() == k.cols() && k.cols() == v.cols(), ErrorCode::kDimension,
          "sdpa: Q, K, V must share dimensionality, got " + shape_string(q.value()) + ", " +
              shape_string(k.value()) + ", " + shape_string(v.value()));
  require(k.rows() == v.rows(), ErrorCode::kDimension, "sdpa: K and V row counts differ");
  AttentionRecorder recorder;
  AttentionLayout<T> layout;
  layout.queries = q.rows();
  layout.keys = k.rows();
  layout.scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  layout.additive_mask = mask;
  layout.recorder = &recorder;
  Var<T> out = attention_core(q, k, v, layout);
  return {out, std::move(recorder.records.front().weights)};
}

template <typename T>
MhaParams<T> make_mha(ParameterStore<T>& store, const std::string& prefix, std::size_t model_dim,
                      std::size_t heads, bool use_bias, Rng& rng) {
  require(heads > 0 && model_dim % heads == 0, ErrorCode::kConfig,
          prefix + ": model width " + std::to_string(model_dim) + " is not heads (" + std::to_string(heads) +
              ") x head width");
  MhaParams<T> p;
  p.heads = heads;
  // Each head's d x d_h block is initialized independently.
  auto per_head = [&](const char* name) {
    const std::size_t dh = model_dim / heads;
    Tensor<T> w(model_dim, model_dim);
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor<T> block = xavier_uniform<T>(model_dim, dh, rng);
      for (std::size_t r = 0; r < model_dim; ++r) {
        for (std::size_t c = 0; c < dh; ++c) {
          w(r, h * dh + c) = block(r, c);
        }
      }
    }
    return &store.add(prefix + "." + name, std::move(w));
  };
  p.query = per_head("wq");
  p.key = per_head("wk");
  p.value = per_head("wv");
  p.output = &store.add(prefix + ".wo", xavier_uniform<T>(model_dim, model_dim, rng));
  if (use_bias) {
    p.query_bias = &store.add(prefix + ".bq", Tensor<T>(1, model_dim));
    p.key_bias = &store.add(prefix + ".bk", Tensor<T>(1, model_dim));
    p.value_bias = &store.add(prefix + ".bv", Tensor<T>(1, model_dim));
    p.output_bias = &store.add(prefix + ".bo", Tensor<T>(1, model_dim));
  }
  return p;
}

template <typename T>
FfnParams<T> make_ffn(ParameterStore<T>& store, const std::string& prefix, std::size_t model_dim,
                      std::size_t inner_dim, double dropout, bool use_bias, Rng& rng) {
  require(inner_dim >= model_dim, ErrorCode::kConfig,
          prefix + ": FFN inner width " + std::to_string(inner_dim) + " below model width " +
              std::to_string(model_dim));
  require(dropout >= 0.0 && dropout < 1.0, ErrorCode::kConfig, prefix + ": dropout rate outside [0, 1)");
  FfnParams<T> p;
  p.dropout = dropout;
  p.inner = &store.add(prefix + ".w1", xavier_uniform<T>(model_dim, inner_dim, rng));
  p.outer = &store.add(prefix + ".w2", xavier_uniform<T>(inner_dim, model_dim, rng));
  if (use_bias) {
    p.inner_bias = &store.add(prefix + ".b1", Tensor<T>(1, inner_dim));
    p.outer_bias = &store.add(prefix + ".b2", Tensor<T>(1, model_dim));
  }
  return p;
}

template <typename T>
LayerNormParams<T> make_layer_norm(ParameterStore<T>& store, const std::string& prefix, std::size_t dim) {
  LayerNormParams<T> p;
  p.gain = &store.add(prefix + ".gain", Tensor<T>(1, dim, T(1)));
  p.bias = &store.add(prefix + ".bias", Tensor<T>(1, dim));
  return p;
}

namespace {

template <typename T>
Var<T> project(Tape<T>& tape, const Var<T>& x, Parameter<T>* w, Parameter<T>* b) {
  Var<T> wv = tape.parameter(*w);
  if (b == nullptr) {
    return matmul(x, wv);
  }
  Var<T> bv = tape.parameter(*b);
  return linear(x, wv, &bv);
}

}  // namespace

template <typename T>
Var<T> multi_head(const Var<T>& queries, const Var<T>& keys, const Var<T>& values, const MhaParams<T>& params,
                  const MhaCall& call, const AttentionOptions& options) {
  Tape<T>& tape = queries.tape();
  const std::size_t d = params.model_dim();
  require(params.head_dim() * params.heads == d, ErrorCode::kConfig, "multi_head: d_h * h != d");
  Var<T> qp = project(tape, queries, params.query, params.query_bias);
  Var<T> kp = project(tape, keys, params.key, params.key_bias);
  Var<T> vp = project(tape, values, params.value, params.value_bias);
  AttentionLayout<T> layout;
  layout.batch = call.batch;
  layout.queries = call.queries;
  layout.keys = call.keys;
  layout.heads = params.heads;
  layout.scale = 1.0 / std::sqrt(static_cast<double>(options.scale_by_model_dim ? d : params.head_dim()));
  layout.causal = call.causal;
  layout.key_valid = call.key_valid;
  layout.dropout = options.attention_dropout;
  layout.recorder = call.recorder;
  layout.role = call.role;
  layout.block = call.block;
  Var<T> heads = attention_core(qp, kp, vp, layout);
  return project(tape, heads, params.output, params.output_bias);
}

template <typename T>
Var<T> multi_head(const Var<T>& queries, const Var<T>& keys_values, const MhaParams<T>& params,
                  const MhaCall& call, const AttentionOptions& options) {
  return multi_head(queries, keys_values, keys_values, params, call, options);
}

template <typename T>
Var<T> ffn(const Var<T>& x, const FfnParams<T>& params) {
  Tape<T>& tape = x.tape();
  Var<T> hidden = relu(project(tape, x, params.inner, params.inner_bias));
  return project(tape, dropout(hidden, params.dropout), params.outer, params.outer_bias);
}

template <typename T>
Var<T> add_norm(const Var<T>& x, const Var<T>& sublayer_out, const LayerNormParams<T>& ln,
                const AttentionOptions& options) {
  Tape<T>& tape = x.tape();
  Var<T> residual = add(x, dropout(sublayer_out, options.residual_dropout));
  return layer_norm(residual, tape.parameter(*ln.gain), tape.parameter(*ln.bias), options.layer_norm_eps);
}

#define MTCAP_INSTANTIATE_ATTENTION(T)                                                                        \
  template Var<T> attention_core(const Var<T>&, const Var<T>&, const Var<T>&, const AttentionLayout<T>&);     \
  template SdpaResult<T> sdpa(const Var<T>&, const Var<T>&, const Var<T>&, const Tensor<T>*);                 \
  template MhaParams<T> make_mha(ParameterStore<T>&, const std::string&, std::size_t, std::size_t, bool,      \
                                 Rng&);                                                                       \
  template FfnParams<T> make_ffn(ParameterStore<T>&, const std::string&, std::size_t, std::size_t, double,    \
                                 bool, Rng&);                                                                 \
  template LayerNormParams<T> make_layer_norm(ParameterStore<T>&, const std::string&, std::size_t);           \
  template Var<T> multi_head(const Var<T>&, const Var<T>&, const Var<T>&, const MhaParams<T>&, const MhaCall&, \
                             const AttentionOptions&);                                                        \
  template Var<T> multi_head(const Var<T>&, const Var<T>&, const MhaParams<T>&, const MhaCall&,               \
                             const AttentionOptions&);                                                        \
  template Var<T> ffn(const Var<T>&, const FfnParams<T>&);                                                    \
  template Var<T> add_norm(const Var<T>&, const Var<T>&, const LayerNormParams<T>&, const AttentionOptions&);

MTCAP_INSTANTIATE_ATTENTION(float)
MTCAP_INSTANTIATE_ATTENTION(double)

#undef MTCAP_INSTANTIATE_ATTENTION

}  // namespace mtcap
