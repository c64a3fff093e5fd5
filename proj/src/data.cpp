// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtcap/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "mtcap/io.hpp"

namespace mtcap {

using nlohmann::ordered_json;

std::string_view relation_token(Relation r) {
  switch (r) {
    case Relation::kLeftOf:
      return "left-of";
    case Relation::kAbove:
      return "above";
    case Relation::kNextTo:
      return "next-to";
  }
  return "next-to";
}

Relation relation_between(const SceneObject& a, const SceneObject& b, bool* a_is_subject) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  if (std::hypot(dx, dy) < kNextToDistance) {
    *a_is_subject = a.x <= b.x;
    return Relation::kNextTo;
  }
  if (std::abs(dx) >= std::abs(dy)) {
    *a_is_subject = a.x < b.x;
    return Relation::kLeftOf;
  }
  *a_is_subject = a.y > b.y;
  return Relation::kAbove;
}

namespace {

// Keeps the described pair away from the relation boundaries.
bool clear_margins(const SceneObject& a, const SceneObject& b) {
  const double dx = std::abs(b.x - a.x);
  const double dy = std::abs(b.y - a.y);
  const double dist = std::hypot(dx, dy);
  if (dist >= 0.18 && dist <= 0.32) {
    return false;
  }
  if (dist > 0.32) {
    const double lo = std::min(dx, dy);
    const double hi = std::max(dx, dy);
    return hi >= 1.5 * lo;
  }
  return true;
}

}  // namespace

Scene gen_scene(std::uint64_t seed) {
  Rng rng(seed);
  Scene s;
  s.seed = seed;
  const std::size_t count = 2 + rng.uniform_index(5);
  s.objects.resize(count);
  for (auto& o : s.objects) {
    o.shape = rng.uniform_index(kShapes.size());
    o.color = rng.uniform_index(kColors.size());
    o.size = rng.uniform_index(kSizes.size());
    o.x = rng.uniform();
    o.y = rng.uniform();
  }
  const std::size_t a = rng.uniform_index(count);
  const std::size_t b = (a + 1 + rng.uniform_index(count - 1)) % count;
  while (!clear_margins(s.objects[a], s.objects[b])) {
    s.objects[b].x = rng.uniform();
    s.objects[b].y = rng.uniform();
  }
  bool a_first = true;
  s.relation = relation_between(s.objects[a], s.objects[b], &a_first);
  s.subject = a_first ? a : b;
  s.object = a_first ? b : a;
  return s;
}

Tensor<float> latent_features(const Scene& scene) {
  Tensor<float> out(scene.objects.size(), kLatentDims);
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const SceneObject& o = scene.objects[i];
    out(i, o.shape) = 1.0F;
    out(i, 4 + o.color) = 1.0F;
    out(i, 8 + o.size) = 1.0F;
    out(i, 10) = static_cast<float>(o.x);
    out(i, 11) = static_cast<float>(o.y);
    out(i, 12) = (i == scene.subject || i == scene.object) ? 1.0F : 0.0F;
  }
  return out;
}

void ViewSpec::validate() const {
  require(width >= kLatentDims, ErrorCode::kConfig,
          "view width " + std::to_string(width) + " is below the " + std::to_string(kLatentDims) + " latent channels");
  require(noise >= 0.0, ErrorCode::kConfig, "view noise must be >= 0");
  require(object_dropout >= 0.0 && object_dropout < 1.0, ErrorCode::kConfig, "object dropout must lie in [0, 1)");
}

Tensor<float> view_projection(const ViewSpec& spec) {
  Tensor<float> p(kLatentDims, spec.width);
  if (spec.identity) {
    for (std::size_t i = 0; i < kLatentDims; ++i) {
      p(i, i) = 1.0F;
    }
    return p;
  }
  Rng rng(spec.projection_seed);
  for (auto& v : p.values()) {
    v = static_cast<float>(rng.normal(0.0, 1.0));
  }
  return p;
}

FeatureViews render_views(const Scene& scene, const std::vector<ViewSpec>& specs, bool aligned, std::uint64_t seed,
                          RenderStats* stats) {
  require(!specs.empty(), ErrorCode::kInvalidArgument, "render_views: need at least one view spec");
  const Tensor<float> latent = latent_features(scene);
  const std::size_t m = latent.rows();
  Rng rng(seed);
  FeatureViews out;
  out.aligned = aligned;
  for (std::size_t v = 0; v < specs.size(); ++v) {
    const ViewSpec& spec = specs[v];
    std::vector<std::size_t> order;
    if (aligned) {
      order.resize(m);
      std::iota(order.begin(), order.end(), std::size_t{0});
    } else {
      for (std::size_t i = 0; i < m; ++i) {
        if (!rng.bernoulli(spec.object_dropout)) {
          order.push_back(i);
        }
      }
      if (order.empty()) {
        order.resize(m);
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (stats != nullptr && v == 0) {
          ++stats->primary_regenerated;
        }
      }
      if (spec.shuffle) {
        rng.shuffle(std::span<std::size_t>(order));
      }
    }
    const Tensor<float> proj = view_projection(spec);
    Tensor<float> f(order.size(), spec.width);
    for (std::size_t r = 0; r < order.size(); ++r) {
      for (std::size_t c = 0; c < spec.width; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < kLatentDims; ++k) {
          acc += static_cast<double>(latent(order[r], k)) * static_cast<double>(proj(k, c));
        }
        f(r, c) = static_cast<float>(acc + (spec.noise > 0.0 ? rng.normal(0.0, spec.noise) : 0.0));
      }
    }
    out.views.push_back(std::move(f));
  }
  return out;
}

Tokens gen_caption(const Scene& scene, double elision, std::uint64_t seed) {
  Rng rng(seed);
  Tokens out;
  auto describe = [&](const SceneObject& o) {
    const bool drop_size = rng.bernoulli(elision);
    const bool drop_color = rng.bernoulli(elision);
    out.emplace_back("a");
    if (!drop_size) out.emplace_back(kSizes[o.size]);
    if (!drop_color) out.emplace_back(kColors[o.color]);
    out.emplace_back(kShapes[o.shape]);
  };
  describe(scene.objects[scene.subject]);
  out.emplace_back(relation_token(scene.relation));
  describe(scene.objects[scene.object]);
  return out;
}

std::vector<Tokens> gen_references(const Scene& scene, std::size_t count, double elision, std::uint64_t seed) {
  std::vector<Tokens> refs;
  refs.push_back(gen_caption(scene, 0.0, seed));
  for (std::size_t k = 1; k < count; ++k) {
    refs.push_back(gen_caption(scene, elision, derive_seed(seed, k)));
  }
  return refs;
}

void GenConfig::validate() const {
  std::string problems;
  auto complain = [&](const std::string& m) { problems += (problems.empty() ? "" : "; ") + m; };
  if (train == 0) complain("train must be >= 1");
  if (val == 0) complain("val must be >= 1");
  if (test == 0) complain("test must be >= 1");
  if (references < 1 || references > 5) complain("references must lie in [1, 5]");
  if (!(elision >= 0.0 && elision < 1.0)) complain("elision must lie in [0, 1)");
  if (views.empty()) complain("views must list at least one view");
  for (std::size_t v = 0; v < views.size(); ++v) {
    try {
      views[v].validate();
    } catch (const Error& e) {
      complain("views[" + std::to_string(v) + "]: " + e.what());
    }
    if (aligned && (views[v].object_dropout > 0.0 || views[v].shuffle)) {
      complain("views[" + std::to_string(v) + "]: object dropout and shuffle need an unaligned dataset");
    }
  }
  if (!problems.empty()) {
    fail(ErrorCode::kConfig, "invalid generation config: " + problems);
  }
}

GenConfig GenConfig::preset_config(std::string_view name) {
  GenConfig c;
  c.preset = std::string(name);
  c.views = {{16, 101, false, 0.1, 0.0, false}, {24, 102, false, 0.1, 0.0, false}, {20, 103, false, 0.1, 0.0, false}};
  if (name == "default") {
    return c;
  }
  if (name == "noisy") {
    c.aligned = false;
    for (auto& v : c.views) {
      v.noise = 1.0;
      v.object_dropout = 0.2;
      v.shuffle = true;
    }
    return c;
  }
  if (name == "tiny") {
    c.train = 40;
    c.val = 10;
    c.test = 10;
    return c;
  }
  fail(ErrorCode::kConfig, "unknown dataset preset '" + std::string(name) + "' (expected default, noisy or tiny)");
}

namespace {

ordered_json to_json(const GenConfig& cfg) {
  ordered_json j;
  j["preset"] = cfg.preset;
  j["seed"] = cfg.seed;
  j["train"] = cfg.train;
  j["val"] = cfg.val;
  j["test"] = cfg.test;
  j["references"] = cfg.references;
  j["elision"] = cfg.elision;
  j["aligned"] = cfg.aligned;
  ordered_json views = ordered_json::array();
  for (const auto& v : cfg.views) {
    views.push_back({{"width", v.width},
                     {"projection_seed", v.projection_seed},
                     {"identity", v.identity},
                     {"noise", v.noise},
                     {"object_dropout", v.object_dropout},
                     {"shuffle", v.shuffle}});
  }
  j["views"] = std::move(views);
  return j;
}

template <typename V>
void read_field(const nlohmann::json& j, const char* key, V& dst) {
  if (j.contains(key)) {
    try {
      dst = j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      fail(ErrorCode::kConfig, std::string("field '") + key + "' has the wrong type");
    }
  }
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  require(out.good(), ErrorCode::kIo, "write failed for " + path.string());
}

std::string image_id(std::string_view split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", index + 1);
  return std::string(split) + "-" + buf;
}

}  // namespace

std::string gen_config_json(const GenConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

GenConfig parse_gen_config(const std::string& json_text, const GenConfig& base) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfig, std::string("generation config is not valid JSON: ") + e.what());
  }
  require(j.is_object(), ErrorCode::kConfig, "generation config must be a JSON object");
  GenConfig c = base;
  if (j.contains("preset")) {
    c = GenConfig::preset_config(j.at("preset").get<std::string>());
  }
  static const std::set<std::string> known{"preset", "seed", "train", "val", "test",
                                           "references", "elision", "aligned", "views"};
  for (const auto& [key, value] : j.items()) {
    require(known.contains(key), ErrorCode::kConfig, "unknown generation config field '" + key + "'");
  }
  read_field(j, "seed", c.seed);
  read_field(j, "train", c.train);
  read_field(j, "val", c.val);
  read_field(j, "test", c.test);
  read_field(j, "references", c.references);
  read_field(j, "elision", c.elision);
  read_field(j, "aligned", c.aligned);
  if (j.contains("views")) {
    require(j["views"].is_array(), ErrorCode::kConfig, "field 'views' must be an array");
    std::vector<ViewSpec> views;
    for (const auto& vj : j["views"]) {
      ViewSpec v;
      v.projection_seed = 101 + views.size();
      read_field(vj, "width", v.width);
      read_field(vj, "projection_seed", v.projection_seed);
      read_field(vj, "identity", v.identity);
      read_field(vj, "noise", v.noise);
      read_field(vj, "object_dropout", v.object_dropout);
      read_field(vj, "shuffle", v.shuffle);
      views.push_back(v);
    }
    c.views = std::move(views);
  }
  c.validate();
  return c;
}

std::vector<SplitSummary> generate_dataset(const GenConfig& cfg, const std::filesystem::path& dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  const std::string config_text = gen_config_json(cfg);
  write_text(dir / "gen_config.json", config_text);
  const std::string hash = hex64(fnv1a(config_text));
  std::vector<std::size_t> widths;
  for (const auto& v : cfg.views) {
    widths.push_back(v.width);
  }
  const std::array<std::size_t, 3> counts{cfg.train, cfg.val, cfg.test};
  std::vector<SplitSummary> summary;
  for (std::size_t si = 0; si < kSplits.size(); ++si) {
    const std::string split(kSplits[si]);
    std::filesystem::create_directories(dir / split, ec);
    require(!ec, ErrorCode::kIo, "cannot create " + (dir / split).string() + ": " + ec.message());
    SplitSummary s;
    s.split = split;
    ordered_json ids = ordered_json::array();
    ordered_json files = ordered_json::array();
    std::string refs_text;
    for (std::size_t i = 0; i < counts[si]; ++i) {
      const std::string id = image_id(split, i);
      const std::uint64_t scene_seed = derive_seed(cfg.seed, si + 1, i);
      const Scene scene = gen_scene(scene_seed);
      RenderStats stats;
      const FeatureViews views = render_views(scene, cfg.views, cfg.aligned, derive_seed(scene_seed, 2), &stats);
      const std::string rel = split + "/" + id + ".fvs";
      write_features(dir / rel, views);
      const auto refs = gen_references(scene, cfg.references, cfg.elision, derive_seed(scene_seed, 3));
      ordered_json line;
      line["id"] = id;
      line["captions"] = ordered_json::array();
      for (const auto& r : refs) {
        line["captions"].push_back(join_tokens(r));
      }
      refs_text += line.dump() + "\n";
      ids.push_back(id);
      files.push_back(rel);
      s.images += 1;
      s.objects += scene.objects.size();
      s.captions += refs.size();
      s.regenerated += stats.primary_regenerated;
    }
    const std::string refs_name = split + "_refs.jsonl";
    write_text(dir / refs_name, refs_text);
    ordered_json manifest;
    manifest["split"] = split;
    manifest["aligned"] = cfg.aligned;
    manifest["num_views"] = cfg.views.size();
    manifest["view_dims"] = widths;
    manifest["references"] = refs_name;
    manifest["config_hash"] = hash;
    manifest["ids"] = std::move(ids);
    manifest["features"] = std::move(files);
    write_text(dir / (split + "_manifest.json"), manifest.dump(2) + "\n");
    summary.push_back(s);
  }
  return summary;
}

Dataset load_split(const std::filesystem::path& dir, std::string_view split) {
  const auto manifest_path = dir / (std::string(split) + "_manifest.json");
  std::ifstream in(manifest_path);
  require(in.good(), ErrorCode::kIo, "cannot open manifest " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, manifest_path.string() + ": " + e.what());
  }
  Dataset d;
  try {
    d.split = m.at("split").get<std::string>();
    d.aligned = m.at("aligned").get<bool>();
    d.view_dims = m.at("view_dims").get<std::vector<std::size_t>>();
    d.ids = m.at("ids").get<std::vector<std::string>>();
    const auto files = m.at("features").get<std::vector<std::string>>();
    require(files.size() == d.ids.size(), ErrorCode::kFormat,
            manifest_path.string() + ": ids and features differ in length");
    const auto refs = read_references(dir / m.at("references").get<std::string>());
    for (std::size_t i = 0; i < d.ids.size(); ++i) {
      FeatureViews fv = read_features(dir / files[i]);
      fv.aligned = d.aligned;
      require(fv.num_views() == d.view_dims.size(), ErrorCode::kFormat,
              (dir / files[i]).string() + ": view count differs from the manifest");
      for (std::size_t v = 0; v < fv.num_views(); ++v) {
        require(fv.views[v].cols() == d.view_dims[v], ErrorCode::kFormat,
                (dir / files[i]).string() + ": view " + std::to_string(v) + " width differs from the manifest");
      }
      fv.validate();
      d.features.push_back(std::move(fv));
      auto it = refs.find(d.ids[i]);
      require(it != refs.end() && !it->second.empty(), ErrorCode::kFormat,
              manifest_path.string() + ": no reference caption for " + d.ids[i]);
      std::vector<Tokens> toks;
      for (const auto& r : it->second) {
        toks.push_back(tokenize(r));
      }
      d.references.push_back(std::move(toks));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, manifest_path.string() + ": " + e.what());
  }
  return d;
}

Dataset select_views(Dataset data, std::size_t count) {
  require(count >= 1 && count <= data.view_dims.size(), ErrorCode::kConfig,
          "cannot use " + std::to_string(count) + " views of a dataset with " + std::to_string(data.view_dims.size()));
  data.view_dims.resize(count);
  for (auto& f : data.features) {
    f.views.resize(count);
  }
  return data;
}

std::vector<Tokens> all_references(const Dataset& data) {
  std::vector<Tokens> out;
  for (const auto& refs : data.references) {
    out.insert(out.end(), refs.begin(), refs.end());
  }
  return out;
}

std::vector<BatchPlan> make_batches(const Dataset& data, const Vocab& vocab, std::size_t batch_size,
                                    std::size_t max_len, std::uint64_t seed, std::size_t epoch) {
  require(batch_size >= 1, ErrorCode::kConfig, "batch size must be >= 1");
  require(data.size() > 0, ErrorCode::kInvalidArgument, "make_batches: empty dataset");
  Rng rng(derive_seed(seed, epoch, 0xba7c));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<BatchPlan> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    BatchPlan plan;
    std::vector<std::vector<std::int32_t>> content;
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
      const auto& refs = data.references[order[i]];
      const Tokens& pick = refs[rng.uniform_index(refs.size())];
      plan.images.push_back(order[i]);
      content.push_back(vocab.encode(pick));
    }
    plan.captions = CaptionBatch::from_content(content, max_len);
    out.push_back(std::move(plan));
  }
  return out;
}

template <typename T>
FeatureBatch<T> gather_features(const Dataset& data, std::span<const std::size_t> images) {
  std::vector<const FeatureViews*> ptrs;
  ptrs.reserve(images.size());
  for (std::size_t i : images) {
    require(i < data.size(), ErrorCode::kRange, "gather_features: image index out of range");
    ptrs.push_back(&data.features[i]);
  }
  return FeatureBatch<T>::from_images(std::span<const FeatureViews* const>(ptrs));
}

template FeatureBatch<float> gather_features(const Dataset&, std::span<const std::size_t>);
template FeatureBatch<double> gather_features(const Dataset&, std::span<const std::size_t>);

}  // namespace mtcap
