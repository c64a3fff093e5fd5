// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtcap/encoders.hpp"

#include <numeric>

#include "mtcap/init.hpp"

namespace mtcap {

void FeatureViews::validate() const {
  require(!views.empty(), ErrorCode::kInvalidArgument, "feature views: need at least one view");
  for (std::size_t i = 0; i < views.size(); ++i) {
    require(views[i].cols() > 0, ErrorCode::kInvalidArgument,
            "feature views: view " + std::to_string(i) + " has zero width");
  }
  require(views[0].rows() > 0, ErrorCode::kInvalidArgument, "feature views: primary view has no objects");
  if (aligned) {
    for (const auto& v : views) {
      require(v.rows() == views[0].rows(), ErrorCode::kInvalidArgument,
              "feature views flagged aligned but object counts differ");
    }
  }
}

Tensor<float> amv_concat(const FeatureViews& image) {
  require(!image.views.empty(), ErrorCode::kInvalidArgument, "AMV: no views");
  const std::size_t m = image.views[0].rows();
  bool same = image.aligned;
  std::size_t width = 0;
  for (const auto& v : image.views) {
    same = same && v.rows() == m;
    width += v.cols();
  }
  require(same, ErrorCode::kInvalidArgument, "AMV requires aligned views");
  Tensor<float> out(m, width);
  std::size_t off = 0;
  for (const auto& v : image.views) {
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < v.cols(); ++c) {
        out(r, off + c) = v(r, c);
      }
    }
    off += v.cols();
  }
  return out;
}

template <typename T>
FeatureBatch<T> FeatureBatch<T>::from_images(std::span<const FeatureViews* const> images) {
  require(!images.empty(), ErrorCode::kInvalidArgument, "feature batch: no images");
  const std::size_t num_views = images[0]->num_views();
  FeatureBatch<T> out;
  out.batch = images.size();
  out.views.resize(num_views);
  for (std::size_t v = 0; v < num_views; ++v) {
    std::size_t max_objects = 0;
    const std::size_t width = images[0]->views[v].cols();
    for (const FeatureViews* img : images) {
      require(img->num_views() == num_views, ErrorCode::kInvalidArgument,
              "feature batch: images carry different view counts");
      require(img->views[v].cols() == width, ErrorCode::kDimension,
              "feature batch: view " + std::to_string(v) + " widths differ (" + std::to_string(width) + " vs " +
                  std::to_string(img->views[v].cols()) + ")");
      max_objects = std::max(max_objects, img->views[v].rows());
    }
    ViewBatch<T>& vb = out.views[v];
    vb.objects = std::max<std::size_t>(max_objects, 1);
    vb.features = Tensor<T>(out.batch * vb.objects, width);
    vb.valid.assign(out.batch * vb.objects, 0);
    for (std::size_t b = 0; b < out.batch; ++b) {
      const Tensor<float>& src = images[b]->views[v];
      for (std::size_t r = 0; r < src.rows(); ++r) {
        vb.valid[b * vb.objects + r] = 1;
        for (std::size_t c = 0; c < width; ++c) {
          vb.features(b * vb.objects + r, c) = static_cast<T>(src(r, c));
        }
      }
    }
  }
  return out;
}

template <typename T>
FeatureBatch<T> FeatureBatch<T>::from_image(const FeatureViews& image) {
  const FeatureViews* ptr = &image;
  return from_images(std::span<const FeatureViews* const>(&ptr, 1));
}

template <typename T>
EncodedImages<T> EncodedImages<T>::select(std::span<const std::size_t> index) const {
  std::vector<std::size_t> rows;
  rows.reserve(index.size() * objects);
  EncodedImages<T> out;
  out.batch = index.size();
  out.objects = objects;
  out.valid.reserve(index.size() * objects);
  for (std::size_t b : index) {
    require(b < batch, ErrorCode::kRange, "encoded images: batch index out of range");
    for (std::size_t r = 0; r < objects; ++r) {
      rows.push_back(b * objects + r);
      out.valid.push_back(valid[b * objects + r]);
    }
  }
  out.features = gather_rows(features, std::span<const std::size_t>(rows));
  return out;
}

template <typename T>
Var<T> encoder_block(const Var<T>& x, const EncoderBlockParams<T>& params, const BlockCall& call,
                     const AttentionOptions& options) {
  MhaCall mc;
  mc.batch = call.batch;
  mc.queries = call.objects;
  mc.keys = call.objects;
  mc.key_valid = call.valid;
  mc.recorder = call.recorder;
  mc.role = AttentionRole::kEncoderSelf;
  mc.block = call.block;
  Var<T> attended = add_norm(x, multi_head(x, x, params.attention, mc, options), params.attention_norm, options);
  return add_norm(attended, ffn(attended, params.ffn), params.ffn_norm, options);
}

template <typename T>
Var<T> umv_block(const Var<T>& primary, std::span<const SecondaryView<T>> others, const UmvBlockParams<T>& params,
                 const BlockCall& call, const AttentionOptions& options) {
  require(call.objects > 0 && primary.rows() > 0, ErrorCode::kInvalidArgument, "UMV block: empty primary view");
  require(others.size() == params.guided.size(), ErrorCode::kInvalidArgument,
          "UMV block: " + std::to_string(others.size()) + " secondary views for " +
              std::to_string(params.guided.size()) + " guided-attention modules");
  Tape<T>& tape = primary.tape();
  Var<T> fused = primary;
  for (std::size_t i = 0; i < others.size(); ++i) {
    MhaCall mc;
    mc.batch = call.batch;
    mc.queries = call.objects;
    mc.keys = others[i].objects;
    mc.key_valid = others[i].valid;
    mc.recorder = call.recorder;
    mc.role = AttentionRole::kMultiViewGuided;
    mc.block = call.block;
    Var<T> attended = multi_head(primary, others[i].features, params.guided[i], mc, options);
    fused = add(fused, dropout(attended, options.residual_dropout));
  }
  Var<T> normed = layer_norm(fused, tape.parameter(*params.fusion_norm.gain), tape.parameter(*params.fusion_norm.bias),
                             options.layer_norm_eps);
  return add_norm(normed, ffn(normed, params.ffn), params.ffn_norm, options);
}

template <typename T>
ImageEncoder<T>::ImageEncoder(const ModelConfig& config, ParameterStore<T>& store, Rng& rng) : config_(config) {
  const std::size_t d = config.model_dim;
  auto add_projection = [&](const std::string& name, std::size_t in) {
    Projection p;
    p.weight = &store.add(name + ".w", xavier_uniform<T>(in, d, rng));
    if (config.use_bias) {
      p.bias = &store.add(name + ".b", Tensor<T>(1, d));
    }
    projections_.push_back(p);
  };
  switch (config.encoder) {
    case EncoderKind::kSingleView:
      add_projection("enc.input", config.view_dims[config.primary_view]);
      break;
    case EncoderKind::kAlignedMultiView:
      add_projection("enc.input", std::accumulate(config.view_dims.begin(), config.view_dims.end(), std::size_t{0}));
      break;
    case EncoderKind::kUnalignedMultiView:
      for (std::size_t v = 0; v < config.view_dims.size(); ++v) {
        add_projection("enc.input" + std::to_string(v), config.view_dims[v]);
      }
      break;
  }
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string prefix = "enc.block" + std::to_string(l + 1);
    if (config.encoder == EncoderKind::kUnalignedMultiView) {
      UmvBlockParams<T> p;
      for (std::size_t v = 0; v < config.view_dims.size(); ++v) {
        if (v != config.primary_view) {
          p.guided.push_back(make_mha(store, prefix + ".guided" + std::to_string(v), d, config.heads,
                                      config.use_bias, rng));
        }
      }
      p.fusion_norm = make_layer_norm(store, prefix + ".fusion_norm", d);
      p.ffn = make_ffn(store, prefix + ".ffn", d, config.ffn_dim, config.dropout, config.use_bias, rng);
      p.ffn_norm = make_layer_norm(store, prefix + ".ffn_norm", d);
      umv_blocks_.push_back(std::move(p));
    } else {
      EncoderBlockParams<T> p;
      p.attention = make_mha(store, prefix + ".self", d, config.heads, config.use_bias, rng);
      p.attention_norm = make_layer_norm(store, prefix + ".self_norm", d);
      p.ffn = make_ffn(store, prefix + ".ffn", d, config.ffn_dim, config.dropout, config.use_bias, rng);
      p.ffn_norm = make_layer_norm(store, prefix + ".ffn_norm", d);
      blocks_.push_back(std::move(p));
    }
  }
}

template <typename T>
Var<T> ImageEncoder<T>::input_projection(Tape<T>& tape, const Var<T>& x, std::size_t index) const {
  require(index < projections_.size(), ErrorCode::kRange, "input projection index out of range");
  const Projection& p = projections_[index];
  require(x.cols() == p.weight->value.rows(), ErrorCode::kDimension,
          "input projection: features are " + std::to_string(x.cols()) + " wide but the model expects " +
              std::to_string(p.weight->value.rows()));
  Var<T> w = tape.parameter(*p.weight);
  if (p.bias == nullptr) {
    return matmul(x, w);
  }
  Var<T> b = tape.parameter(*p.bias);
  return linear(x, w, &b);
}

template <typename T>
Var<T> ImageEncoder<T>::sv_encode(const Var<T>& x0, const BlockCall& call, const AttentionOptions& options) const {
  require(!blocks_.empty(), ErrorCode::kConfig, "encoder has no self-attention blocks");
  Var<T> x = x0;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    BlockCall c = call;
    c.block = static_cast<int>(l + 1);
    x = encoder_block(x, blocks_[l], c, options);
  }
  return x;
}

template <typename T>
void ImageEncoder<T>::check_batch(const FeatureBatch<T>& batch) const {
  require(batch.batch > 0, ErrorCode::kInvalidArgument, "encoder: empty batch");
  require(batch.views.size() >= config_.view_dims.size(), ErrorCode::kDimension,
          "encoder: model consumes " + std::to_string(config_.view_dims.size()) + " views but features carry " +
              std::to_string(batch.views.size()));
  for (std::size_t v = 0; v < config_.view_dims.size(); ++v) {
    require(batch.views[v].features.cols() == config_.view_dims[v], ErrorCode::kDimension,
            "encoder: view " + std::to_string(v) + " is " + std::to_string(batch.views[v].features.cols()) +
                " wide, model expects " + std::to_string(config_.view_dims[v]));
  }
}

template <typename T>
EncodedImages<T> ImageEncoder<T>::encode(Tape<T>& tape, const FeatureBatch<T>& batch,
                                         AttentionRecorder* recorder) const {
  check_batch(batch);
  const AttentionOptions options = config_.attention_options();
  EncodedImages<T> out;
  out.batch = batch.batch;
  switch (config_.encoder) {
    case EncoderKind::kSingleView: {
      const ViewBatch<T>& vb = batch.views[config_.primary_view];
      out.objects = vb.objects;
      out.valid = vb.valid;
      BlockCall call{batch.batch, vb.objects, &out.valid, recorder, 0};
      out.features = sv_encode(input_projection(tape, tape.constant(vb.features), 0), call, options);
      break;
    }
    case EncoderKind::kAlignedMultiView: {
      const std::size_t m = batch.views[0].objects;
      std::vector<Var<T>> parts;
      for (std::size_t v = 0; v < config_.view_dims.size(); ++v) {
        require(batch.views[v].objects == m && batch.views[v].valid == batch.views[0].valid,
                ErrorCode::kInvalidArgument, "AMV requires aligned views");
        parts.push_back(tape.constant(batch.views[v].features));
      }
      out.objects = m;
      out.valid = batch.views[0].valid;
      BlockCall call{batch.batch, m, &out.valid, recorder, 0};
      Var<T> x = parts.size() == 1 ? parts[0] : concat_columns(std::span<const Var<T>>(parts));
      out.features = sv_encode(input_projection(tape, x, 0), call, options);
      break;
    }
    case EncoderKind::kUnalignedMultiView: {
      const std::size_t pv = config_.primary_view;
      const ViewBatch<T>& primary = batch.views[pv];
      out.objects = primary.objects;
      out.valid = primary.valid;
      std::vector<SecondaryView<T>> others;
      for (std::size_t v = 0; v < config_.view_dims.size(); ++v) {
        if (v == pv) {
          continue;
        }
        SecondaryView<T> s;
        s.features = input_projection(tape, tape.constant(batch.views[v].features), v);
        s.objects = batch.views[v].objects;
        s.valid = &batch.views[v].valid;
        others.push_back(s);
      }
      Var<T> f = input_projection(tape, tape.constant(primary.features), pv);
      for (std::size_t l = 0; l < umv_blocks_.size(); ++l) {
        BlockCall call{batch.batch, primary.objects, &out.valid, recorder, static_cast<int>(l + 1)};
        f = umv_block(f, std::span<const SecondaryView<T>>(others), umv_blocks_[l], call, options);
      }
      out.features = f;
      break;
    }
  }
  return out;
}

#define MTCAP_INSTANTIATE_ENCODERS(T)                                                                          \
  template struct FeatureBatch<T>;                                                                             \
  template struct EncodedImages<T>;                                                                            \
  template class ImageEncoder<T>;                                                                              \
  template Var<T> encoder_block(const Var<T>&, const EncoderBlockParams<T>&, const BlockCall&,                 \
                                const AttentionOptions&);                                                      \
  template Var<T> umv_block(const Var<T>&, std::span<const SecondaryView<T>>, const UmvBlockParams<T>&,        \
                            const BlockCall&, const AttentionOptions&);

MTCAP_INSTANTIATE_ENCODERS(float)
MTCAP_INSTANTIATE_ENCODERS(double)

#undef MTCAP_INSTANTIATE_ENCODERS

}  // namespace mtcap
