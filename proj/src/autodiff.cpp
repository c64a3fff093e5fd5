// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtcap/autodiff.hpp"

#include <cmath>
#include <limits>

namespace mtcap {

namespace {

template <typename T>
void check_same_tape(const Var<T>& a, const Var<T>& b) {
  require(a.valid() && b.valid() && &a.tape() == &b.tape(), ErrorCode::kInvalidArgument,
          "operands recorded on different tapes");
}

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::kDimension,
          std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

template <typename T>
bool any_requires(const Tape<T>& t, std::initializer_list<std::uint32_t> ids) {
  for (auto id : ids) {
    if (t.requires_grad(id)) {
      return true;
    }
  }
  return false;
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  check_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require(av.cols() == bv.rows(), ErrorCode::kDimension,
          "matmul: inner dimensions differ, " + shape_string(av) + " * " + shape_string(bv));
  Tape<T>& t = a.tape();
  Tensor<T> out(av.rows(), bv.cols());
  gemm_nn(av, bv, out, false);
  const auto ia = a.id();
  const auto ib = b.id();
  return t.push(std::move(out), any_requires(t, {ia, ib}), [ia, ib](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      gemm_nt(g, tp.value(ib), tp.grad_buffer(ia), true);
    }
    if (tp.requires_grad(ib)) {
      gemm_tn(tp.value(ia), g, tp.grad_buffer(ib), true);
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_tape(a, b);
  check_same_shape("add", a.value(), b.value());
  Tensor<T> out = a.value();
  add_into(out, b.value());
  Tape<T>& t = a.tape();
  const auto ia = a.id();
  const auto ib = b.id();
  return t.push(std::move(out), any_requires(t, {ia, ib}), [ia, ib](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      add_into(tp.grad_buffer(ia), g);
    }
    if (tp.requires_grad(ib)) {
      add_into(tp.grad_buffer(ib), g);
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_tape(a, b);
  check_same_shape("sub", a.value(), b.value());
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] -= bv[i];
  }
  Tape<T>& t = a.tape();
  const auto ia = a.id();
  const auto ib = b.id();
  return t.push(std::move(out), any_requires(t, {ia, ib}), [ia, ib](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      add_into(tp.grad_buffer(ia), g);
    }
    if (tp.requires_grad(ib)) {
      Tensor<T>& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) {
        gb[i] -= g[i];
      }
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_tape(a, b);
  check_same_shape("mul", a.value(), b.value());
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] *= bv[i];
  }
  Tape<T>& t = a.tape();
  const auto ia = a.id();
  const auto ib = b.id();
  return t.push(std::move(out), any_requires(t, {ia, ib}), [ia, ib](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      Tensor<T>& ga = tp.grad_buffer(ia);
      const Tensor<T>& bv2 = tp.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] * bv2[i];
      }
    }
    if (tp.requires_grad(ib)) {
      Tensor<T>& gb = tp.grad_buffer(ib);
      const Tensor<T>& av2 = tp.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) {
        gb[i] += g[i] * av2[i];
      }
    }
  });
}

template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& row) {
  check_same_tape(x, row);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& rv = row.value();
  require(rv.rows() == 1 && rv.cols() == xv.cols(), ErrorCode::kDimension,
          "add_row: cannot broadcast " + shape_string(rv) + " over " + shape_string(xv));
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    T* o = out.data() + i * out.cols();
    for (std::size_t j = 0; j < out.cols(); ++j) {
      o[j] += rv[j];
    }
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  const auto ir = row.id();
  return t.push(std::move(out), any_requires(t, {ix, ir}), [ix, ir](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.requires_grad(ix)) {
      add_into(tp.grad_buffer(ix), g);
    }
    if (tp.requires_grad(ir)) {
      Tensor<T>& gr = tp.grad_buffer(ir);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) {
          gr[j] += g(i, j);
        }
      }
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, double s) {
  const T f = static_cast<T>(s);
  Tensor<T> out = x.value();
  for (auto& v : out.values()) {
    v *= f;
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  return t.push(std::move(out), t.requires_grad(ix), [ix, f](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx[i] += g[i] * f;
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) {
    v = v > T(0) ? v : T(0);
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  return t.push(std::move(out), t.requires_grad(ix), [ix](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& xv = tp.value(ix);
    Tensor<T>& gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > T(0)) {
        gx[i] += g[i];
      }
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) {
    v = T(1) / (T(1) + std::exp(-v));
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  return t.push(std::move(out), t.requires_grad(ix), [ix](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& y = tp.value(self);
    Tensor<T>& gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx[i] += g[i] * y[i] * (T(1) - y[i]);
    }
  });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) {
    v = std::tanh(v);
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  return t.push(std::move(out), t.requires_grad(ix), [ix](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& y = tp.value(self);
    Tensor<T>& gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx[i] += g[i] * (T(1) - y[i] * y[i]);
    }
  });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double rate) {
  require(rate >= 0.0 && rate < 1.0, ErrorCode::kConfig,
          "dropout rate must lie in [0, 1), got " + std::to_string(rate));
  Tape<T>& t = x.tape();
  if (!t.training() || rate == 0.0) {
    return x;
  }
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> mask(x.rows(), x.cols());
  for (auto& m : mask.values()) {
    m = t.rng().uniform() < rate ? T(0) : keep_scale;
  }
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] *= mask[i];
  }
  const auto ix = x.id();
  return t.push(std::move(out), t.requires_grad(ix),
                [ix, mask = std::move(mask)](Tape<T>& tp, std::uint32_t self) {
                  const Tensor<T>& g = tp.grad(self);
                  Tensor<T>& gx = tp.grad_buffer(ix);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    gx[i] += g[i] * mask[i];
                  }
                });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  return t.push(transposed(x.value()), t.requires_grad(ix), [ix](Tape<T>& tp, std::uint32_t self) {
    add_into(tp.grad_buffer(ix), transposed(tp.grad(self)));
  });
}

template <typename T>
Var<T> concat_columns(std::span<const Var<T>> parts) {
  require(!parts.empty(), ErrorCode::kInvalidArgument, "concat_columns: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    check_same_tape(parts[0], p);
    require(p.rows() == rows, ErrorCode::kDimension,
            "concat_columns: row counts differ, " + shape_string(parts[0].value()) + " vs " +
                shape_string(p.value()));
    cols += p.cols();
  }
  Tensor<T> out(rows, cols);
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  bool needs = false;
  Tape<T>& t = parts[0].tape();
  for (const auto& p : parts) {
    const Tensor<T>& v = p.value();
    for (std::size_t i = 0; i < rows; ++i) {
      std::copy(v.row(i).begin(), v.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(off));
    }
    ids.push_back(p.id());
    offsets.push_back(off);
    needs = needs || t.requires_grad(p.id());
    off += v.cols();
  }
  return t.push(std::move(out), needs, [ids, offsets](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) {
        continue;
      }
      Tensor<T>& gp = tp.grad_buffer(ids[k]);
      for (std::size_t i = 0; i < gp.rows(); ++i) {
        for (std::size_t j = 0; j < gp.cols(); ++j) {
          gp(i, j) += g(i, offsets[k] + j);
        }
      }
    }
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  require(!parts.empty(), ErrorCode::kInvalidArgument, "concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    check_same_tape(parts[0], p);
    require(p.cols() == cols, ErrorCode::kDimension,
            "concat_rows: column counts differ, " + shape_string(parts[0].value()) + " vs " +
                shape_string(p.value()));
    rows += p.rows();
  }
  std::vector<T> buf;
  buf.reserve(rows * cols);
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  bool needs = false;
  Tape<T>& t = parts[0].tape();
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor<T>& v = p.value();
    buf.insert(buf.end(), v.values().begin(), v.values().end());
    ids.push_back(p.id());
    offsets.push_back(off);
    off += v.rows();
    needs = needs || t.requires_grad(p.id());
  }
  return t.push(Tensor<T>(rows, cols, std::move(buf)), needs,
                [ids, offsets](Tape<T>& tp, std::uint32_t self) {
                  const Tensor<T>& g = tp.grad(self);
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (!tp.requires_grad(ids[k])) {
                      continue;
                    }
                    Tensor<T>& gp = tp.grad_buffer(ids[k]);
                    const T* src = g.data() + offsets[k] * g.cols();
                    for (std::size_t i = 0; i < gp.size(); ++i) {
                      gp[i] += src[i];
                    }
                  }
                });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t count) {
  const Tensor<T>& xv = x.value();
  require(start + count <= xv.rows() && count > 0, ErrorCode::kRange,
          "slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
              ") outside " + shape_string(xv));
  const auto first = xv.values().begin() + static_cast<std::ptrdiff_t>(start * xv.cols());
  Tensor<T> out(count, xv.cols(),
                std::vector<T>(first, first + static_cast<std::ptrdiff_t>(count * xv.cols())));
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  return t.push(std::move(out), t.requires_grad(ix), [ix, start](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad_buffer(ix);
    T* dst = gx.data() + start * gx.cols();
    for (std::size_t i = 0; i < g.size(); ++i) {
      dst[i] += g[i];
    }
  });
}

template <typename T>
Var<T> slice_columns(const Var<T>& x, std::size_t start, std::size_t count) {
  const Tensor<T>& xv = x.value();
  require(start + count <= xv.cols() && count > 0, ErrorCode::kRange,
          "slice_columns: [" + std::to_string(start) + ", " + std::to_string(start + count) +
              ") outside " + shape_string(xv));
  Tensor<T> out(xv.rows(), count);
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    for (std::size_t j = 0; j < count; ++j) {
      out(i, j) = xv(i, start + j);
    }
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  return t.push(std::move(out), t.requires_grad(ix), [ix, start](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < g.cols(); ++j) {
        gx(i, start + j) += g(i, j);
      }
    }
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> index) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(index.size(), xv.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < xv.rows(), ErrorCode::kRange,
            "gather_rows: index " + std::to_string(index[i]) + " outside " + shape_string(xv));
    std::copy(xv.row(index[i]).begin(), xv.row(index[i]).end(), out.row(i).begin());
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return t.push(std::move(out), t.requires_grad(ix),
                [ix, idx = std::move(idx)](Tape<T>& tp, std::uint32_t self) {
                  const Tensor<T>& g = tp.grad(self);
                  Tensor<T>& gx = tp.grad_buffer(ix);
                  for (std::size_t i = 0; i < idx.size(); ++i) {
                    for (std::size_t j = 0; j < g.cols(); ++j) {
                      gx(idx[i], j) += g(i, j);
                    }
                  }
                });
}

template <typename T>
Var<T> embedding_lookup(const Var<T>& table, std::span<const std::int32_t> ids, std::int64_t pinned_id) {
  const Tensor<T>& tv = table.value();
  Tensor<T> out(ids.size(), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < tv.rows(), ErrorCode::kRange,
            "embedding_lookup: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                std::to_string(tv.rows()));
    if (ids[i] == pinned_id) {
      continue;
    }
    std::copy(tv.row(ids[i]).begin(), tv.row(ids[i]).end(), out.row(i).begin());
  }
  Tape<T>& t = table.tape();
  const auto it = table.id();
  std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
  return t.push(std::move(out), t.requires_grad(it),
                [it, id_copy = std::move(id_copy), pinned_id](Tape<T>& tp, std::uint32_t self) {
                  const Tensor<T>& g = tp.grad(self);
                  Tensor<T>& gt = tp.grad_buffer(it);
                  for (std::size_t i = 0; i < id_copy.size(); ++i) {
                    if (id_copy[i] == pinned_id) {
                      continue;
                    }
                    for (std::size_t j = 0; j < g.cols(); ++j) {
                      gt(id_copy[i], j) += g(i, j);
                    }
                  }
                });
}

template <typename T>
Var<T> mean_rows(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  require(xv.rows() > 0, ErrorCode::kDimension, "mean_rows: empty input");
  Tensor<T> out(1, xv.cols());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    for (std::size_t j = 0; j < xv.cols(); ++j) {
      out[j] += xv(i, j);
    }
  }
  const T inv = T(1) / static_cast<T>(xv.rows());
  for (auto& v : out.values()) {
    v *= inv;
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  return t.push(std::move(out), t.requires_grad(ix), [ix, inv](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < gx.rows(); ++i) {
      for (std::size_t j = 0; j < gx.cols(); ++j) {
        gx(i, j) += g[j] * inv;
      }
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total = T(0);
  for (T v : x.value().values()) {
    total += v;
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  return t.push(Tensor<T>(1, 1, total), t.requires_grad(ix), [ix](Tape<T>& tp, std::uint32_t self) {
    const T g = tp.grad(self)[0];
    for (auto& v : tp.grad_buffer(ix).values()) {
      v += g;
    }
  });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  check_same_shape("weighted_sum", x.value(), weights);
  T total = T(0);
  const Tensor<T>& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    total += weights[i] * xv[i];
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  return t.push(Tensor<T>(1, 1, total), t.requires_grad(ix),
                [ix, weights](Tape<T>& tp, std::uint32_t self) {
                  const T g = tp.grad(self)[0];
                  Tensor<T>& gx = tp.grad_buffer(ix);
                  for (std::size_t i = 0; i < gx.size(); ++i) {
                    gx[i] += g * weights[i];
                  }
                });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x, const Tensor<T>* mask) {
  const Tensor<T>& xv = x.value();
  if (mask != nullptr) {
    check_same_shape("softmax_rows mask", xv, *mask);
  }
  Tensor<T> out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any_open = mask == nullptr;
    for (std::size_t j = 0; j < xv.cols(); ++j) {
      T v = xv(i, j);
      if (mask != nullptr) {
        const T m = (*mask)(i, j);
        any_open = any_open || !is_masked(static_cast<double>(m));
        v += m;
      }
      out(i, j) = v;
      mx = std::max(mx, v);
    }
    require(any_open, ErrorCode::kNumeric,
            "degenerate attention row " + std::to_string(i) + ": every position is masked");
    T denom = T(0);
    for (std::size_t j = 0; j < xv.cols(); ++j) {
      out(i, j) = std::exp(out(i, j) - mx);
      denom += out(i, j);
    }
    for (std::size_t j = 0; j < xv.cols(); ++j) {
      out(i, j) /= denom;
    }
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  return t.push(std::move(out), t.requires_grad(ix), [ix](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& y = tp.value(self);
    Tensor<T>& gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < y.cols(); ++j) {
        dot += g(i, j) * y(i, j);
      }
      for (std::size_t j = 0; j < y.cols(); ++j) {
        gx(i, j) += y(i, j) * (g(i, j) - dot);
      }
    }
  });
}

template <typename T>
Var<T> log_softmax_rows(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < xv.cols(); ++j) {
      mx = std::max(mx, xv(i, j));
    }
    T denom = T(0);
    for (std::size_t j = 0; j < xv.cols(); ++j) {
      denom += std::exp(xv(i, j) - mx);
    }
    const T lse = mx + std::log(denom);
    for (std::size_t j = 0; j < xv.cols(); ++j) {
      out(i, j) = xv(i, j) - lse;
    }
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  return t.push(std::move(out), t.requires_grad(ix), [ix](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& y = tp.value(self);
    Tensor<T>& gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      T gsum = T(0);
      for (std::size_t j = 0; j < y.cols(); ++j) {
        gsum += g(i, j);
      }
      for (std::size_t j = 0; j < y.cols(); ++j) {
        gx(i, j) += g(i, j) - std::exp(y(i, j)) * gsum;
      }
    }
  });
}

template <typename T>
Var<T> pick(const Var<T>& x, std::span<const std::int32_t> columns) {
  const Tensor<T>& xv = x.value();
  require(columns.size() == xv.rows(), ErrorCode::kDimension,
          "pick: " + std::to_string(columns.size()) + " indices for " + shape_string(xv));
  Tensor<T> out(xv.rows(), 1);
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    require(columns[i] >= 0 && static_cast<std::size_t>(columns[i]) < xv.cols(), ErrorCode::kRange,
            "pick: column " + std::to_string(columns[i]) + " outside " + shape_string(xv));
    out[i] = xv(i, columns[i]);
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  std::vector<std::int32_t> cols(columns.begin(), columns.end());
  return t.push(std::move(out), t.requires_grad(ix),
                [ix, cols = std::move(cols)](Tape<T>& tp, std::uint32_t self) {
                  const Tensor<T>& g = tp.grad(self);
                  Tensor<T>& gx = tp.grad_buffer(ix);
                  for (std::size_t i = 0; i < cols.size(); ++i) {
                    gx(i, cols[i]) += g[i];
                  }
                });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps) {
  check_same_tape(x, gain);
  check_same_tape(x, bias);
  const Tensor<T>& xv = x.value();
  const std::size_t d = xv.cols();
  require(d >= 2, ErrorCode::kDimension, "layer_norm needs at least 2 features, got " + shape_string(xv));
  require(gain.value().size() == d && bias.value().size() == d, ErrorCode::kDimension,
          "layer_norm: gain/bias width differs from " + shape_string(xv));
  const Tensor<T>& gv = gain.value();
  const Tensor<T>& bv = bias.value();
  Tensor<T> normed(xv.rows(), d);
  Tensor<T> inv_std(xv.rows(), 1);
  Tensor<T> out(xv.rows(), d);
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      mean += xv(i, j);
    }
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = xv(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      normed(i, j) = (xv(i, j) - mean) * is;
      out(i, j) = normed(i, j) * gv[j] + bv[j];
    }
  }
  Tape<T>& t = x.tape();
  const auto ix = x.id();
  const auto ig = gain.id();
  const auto ib = bias.id();
  return t.push(
      std::move(out), any_requires(t, {ix, ig, ib}),
      [ix, ig, ib, normed = std::move(normed), inv_std = std::move(inv_std)](Tape<T>& tp, std::uint32_t self) {
        const Tensor<T>& g = tp.grad(self);
        const std::size_t rows = g.rows();
        const std::size_t dd = g.cols();
        if (tp.requires_grad(ig)) {
          Tensor<T>& gg = tp.grad_buffer(ig);
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < dd; ++j) {
              gg[j] += g(i, j) * normed(i, j);
            }
          }
        }
        if (tp.requires_grad(ib)) {
          Tensor<T>& gb = tp.grad_buffer(ib);
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < dd; ++j) {
              gb[j] += g(i, j);
            }
          }
        }
        if (tp.requires_grad(ix)) {
          const Tensor<T>& gv2 = tp.value(ig);
          Tensor<T>& gx = tp.grad_buffer(ix);
          const T inv_d = T(1) / static_cast<T>(dd);
          for (std::size_t i = 0; i < rows; ++i) {
            T sum_dn = T(0);
            T sum_dn_n = T(0);
            for (std::size_t j = 0; j < dd; ++j) {
              const T dn = g(i, j) * gv2[j];
              sum_dn += dn;
              sum_dn_n += dn * normed(i, j);
            }
            for (std::size_t j = 0; j < dd; ++j) {
              const T dn = g(i, j) * gv2[j];
              gx(i, j) += inv_std[i] * (dn - inv_d * sum_dn - normed(i, j) * inv_d * sum_dn_n);
            }
          }
        }
      });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>* bias) {
  Var<T> y = matmul(x, weight);
  return bias != nullptr ? add_row(y, *bias) : y;
}

template <typename T>
LstmState<T> lstm_cell(const Var<T>& x, const LstmState<T>& prev, const LstmParams<T>& params) {
  Tape<T>& t = x.tape();
  const std::size_t hidden = params.hidden();
  require(params.input_weight->value.rows() == x.cols(), ErrorCode::kDimension,
          "lstm_cell: input width " + std::to_string(x.cols()) + " vs weight " +
              shape_string(params.input_weight->value));
  require(prev.h.cols() == hidden && prev.c.cols() == hidden && prev.h.rows() == x.rows(),
          ErrorCode::kDimension, "lstm_cell: state shape differs from hidden size " + std::to_string(hidden));
  Var<T> wx = t.parameter(*params.input_weight);
  Var<T> wh = t.parameter(*params.hidden_weight);
  Var<T> b = t.parameter(*params.bias);
  Var<T> gates = add_row(add(matmul(x, wx), matmul(prev.h, wh)), b);
  Var<T> in_gate = sigmoid(slice_columns(gates, 0, hidden));
  Var<T> forget_gate = sigmoid(slice_columns(gates, hidden, hidden));
  Var<T> cell_in = tanh(slice_columns(gates, 2 * hidden, hidden));
  Var<T> out_gate = sigmoid(slice_columns(gates, 3 * hidden, hidden));
  Var<T> c = add(mul(forget_gate, prev.c), mul(in_gate, cell_in));
  Var<T> h = mul(out_gate, tanh(c));
  return {h, c};
}

#define MTCAP_INSTANTIATE_OPS(T)                                                                   \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                            \
  template Var<T> add(const Var<T>&, const Var<T>&);                                               \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                               \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                               \
  template Var<T> add_row(const Var<T>&, const Var<T>&);                                           \
  template Var<T> scale(const Var<T>&, double);                                                    \
  template Var<T> relu(const Var<T>&);                                                             \
  template Var<T> sigmoid(const Var<T>&);                                                          \
  template Var<T> tanh(const Var<T>&);                                                             \
  template Var<T> dropout(const Var<T>&, double);                                                  \
  template Var<T> transpose(const Var<T>&);                                                        \
  template Var<T> concat_columns(std::span<const Var<T>>);                                         \
  template Var<T> concat_rows(std::span<const Var<T>>);                                            \
  template Var<T> slice_rows(const Var<T>&, std::size_t, std::size_t);                             \
  template Var<T> slice_columns(const Var<T>&, std::size_t, std::size_t);                          \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                        \
  template Var<T> embedding_lookup(const Var<T>&, std::span<const std::int32_t>, std::int64_t);    \
  template Var<T> mean_rows(const Var<T>&);                                                        \
  template Var<T> sum(const Var<T>&);                                                              \
  template Var<T> weighted_sum(const Var<T>&, const Tensor<T>&);                                   \
  template Var<T> softmax_rows(const Var<T>&, const Tensor<T>*);                                   \
  template Var<T> log_softmax_rows(const Var<T>&);                                                 \
  template Var<T> pick(const Var<T>&, std::span<const std::int32_t>);                              \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);                 \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>*);                             \
  template LstmState<T> lstm_cell(const Var<T>&, const LstmState<T>&, const LstmParams<T>&);

MTCAP_INSTANTIATE_OPS(float)
MTCAP_INSTANTIATE_OPS(double)

#undef MTCAP_INSTANTIATE_OPS

}  // namespace mtcap
