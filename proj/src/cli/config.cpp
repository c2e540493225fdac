#include <cmath>
#include <cstdio>
#include <set>

#include "patchrot/cli.hpp"

namespace patchrot::cli {

namespace {

json dataset_defaults() {
  return {
      {"kind", "synthetic"},
      {"name", ""},
      {"train", json::array()},
      {"test", json::array()},
      {"n_classes", nullptr},
      {"augment", "auto"},
      {"limit_train", 0},
      {"limit_test", 0},
      {"synthetic", {{"n_train", 2000}, {"n_test", 500}, {"size", 32}, {"seed", 0}}},
  };
}

std::string join_path(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

const char* type_name(const json& j) {
  if (j.is_null()) return "null";
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "list";
  return "object";
}

void merge_at(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError(path.empty() ? "config must be an object" : path + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = join_path(path, it.key());
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    const json& value = it.value();
    if (slot.is_object()) {
      merge_at(slot, value, key);
      continue;
    }
    bool ok = false;
    if (slot.is_null()) {
      ok = value.is_null() || value.is_number();
    } else if (slot.is_boolean()) {
      ok = value.is_boolean();
    } else if (slot.is_number_integer()) {
      ok = value.is_number_integer() || (value.is_number_float() && value.get<double>() == std::floor(value.get<double>()));
    } else if (slot.is_number()) {
      ok = value.is_number();
    } else if (slot.is_string()) {
      // Keys that take "all" also take a list, and lists of names take one name.
      ok = value.is_string() || (value.is_array() && slot == "all");
    } else if (slot.is_array()) {
      ok = value.is_array() || value.is_string();
    }
    if (!ok) throw ConfigError(key + ": expected " + type_name(slot) + ", got " + type_name(value));
    if (slot.is_number_integer() && value.is_number_float()) {
      slot = static_cast<std::int64_t>(value.get<double>());
    } else if (slot.is_number_float() && value.is_number_integer()) {
      slot = value.get<double>();
    } else {
      slot = value;
    }
  }
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

void check_positive(const json& section, const std::string& path, std::initializer_list<const char*> keys) {
  for (const char* k : keys) require(section.at(k).get<double>() > 0, join_path(path, k) + " must be positive");
}

void check_non_negative(const json& section, const std::string& path, std::initializer_list<const char*> keys) {
  for (const char* k : keys) require(section.at(k).get<double>() >= 0, join_path(path, k) + " must be >= 0");
}

void validate_dataset(json& d, const std::string& path) {
  static const std::set<std::string> kinds{"synthetic", "cifar10", "cifar100", "idx", "primg"};
  const std::string kind = d["kind"];
  require(kinds.count(kind) > 0, path + ".kind: unknown dataset kind '" + kind + "'");
  for (const char* list : {"train", "test"}) {
    require(d[list].is_array(), join_path(path, list) + " must be a list of paths");
    for (const auto& p : d[list]) require(p.is_string(), join_path(path, list) + " must hold paths");
  }
  if (kind != "synthetic") require(!d["train"].empty(), path + ".train: no files given for dataset kind " + kind);
  if (kind == "idx") {
    require(d["train"].size() == 2, path + ".train: idx needs [images, labels]");
    require(d["test"].empty() || d["test"].size() == 2, path + ".test: idx needs [images, labels]");
  }
  if (kind == "primg") require(d["train"].size() == 1 && d["test"].size() <= 1, path + ": primg takes one archive per split");
  const std::string augment = d["augment"];
  require(augment == "auto" || augment == "standard" || augment == "none",
          path + ".augment must be auto, standard or none");
  if (augment == "auto") d["augment"] = (kind == "cifar10" || kind == "cifar100") ? "standard" : "none";
  if (d["name"] == "") d["name"] = kind;
  if (d["n_classes"].is_null()) d["n_classes"] = kind == "cifar100" ? 100 : 10;
  require(d["n_classes"].get<double>() >= 2, path + ".n_classes must be >= 2");
  check_non_negative(d, path, {"limit_train", "limit_test"});
  check_positive(d["synthetic"], path + ".synthetic", {"n_train", "n_test", "size"});
}

std::vector<std::string> string_list(const json& j, const std::string& path) {
  std::vector<std::string> out;
  if (j.is_string()) return {j.get<std::string>()};
  for (const auto& v : j) {
    require(v.is_string(), path + " must hold strings");
    out.push_back(v);
  }
  return out;
}

std::string fnv_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

data::AugmentConfig augment_policy(const std::string& policy) {
  data::AugmentConfig a;
  if (policy == "standard") {
    a.pad = 4;
    a.random_crop = true;
    a.hflip = true;
  }
  return a;
}

}  // namespace

json default_config() {
  return {
      {"seed", 0},
      {"output_dir", "runs"},
      {"dataset", dataset_defaults()},
      {"model",
       {{"patch_size", 4},
        {"embed_dim", 256},
        {"n_blocks", 7},
        {"n_heads", 4},
        {"expansion", 512},
        {"dropout", 0.1},
        {"dtype", "f32"}}},
      {"pretext",
       {{"buffer", nullptr},
        {"no_image_rot", false},
        {"no_patch_rot", false},
        {"rotate_img_and_patch", false},
        {"original_size", false},
        {"force_zero_rotation", false},
        {"share_patch_heads", false},
        {"reuse_mlp_head", false},
        {"loss_reduction", "mean"},
        {"holdout_fraction", 0.05}}},
      {"optimizer",
       {{"lr", 5e-4},
        {"weight_decay", 3e-2},
        {"beta1", 0.9},
        {"beta2", 0.999},
        {"eps", 1e-8},
        {"warmup_epochs", 10},
        {"min_lr", 0.0}}},
      {"pretrain", {{"epochs", 300}, {"batch_size", 128}, {"eval_every", 1}, {"checkpoint_every", 0}}},
      {"finetune",
       {{"epochs", 200},
        {"batch_size", 128},
        {"eval_every", 1},
        {"freeze", "NF"},
        {"init", "random"},
        {"lr", nullptr},
        {"weight_decay", nullptr},
        {"warmup_epochs", nullptr}}},
      {"harness",
       {{"freeze_modes", "all"},
        {"label_counts", {40, 400, 4000}},
        {"variants", "all"},
        {"pretrain_epochs", {25, 50, 100, 300}},
        {"transfer_inits", {"patchrot", "supervised"}},
        {"source", dataset_defaults()},
        {"attention", "cls"},
        {"attention_images", 8}}},
  };
}

void merge_config(json& config, const json& patch) { merge_at(config, patch, ""); }

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t at = 0;;) {
    const auto dot = rest.find('.', at);
    parts.push_back(rest.substr(at, dot == std::string::npos ? std::string::npos : dot - at));
    if (dot == std::string::npos) break;
    at = dot + 1;
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    if (it->empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    patch = json{{*it, patch}};
  }
  merge_config(config, patch);
}

json resolve_config(json c) {
  // Re-merging onto defaults rejects unknown keys in hand-built documents.
  json base = default_config();
  merge_config(base, c);
  c = std::move(base);
  require(c["seed"].get<double>() >= 0, "seed must be >= 0");
  validate_dataset(c["dataset"], "dataset");
  validate_dataset(c["harness"]["source"], "harness.source");

  json& m = c["model"];
  check_positive(m, "model", {"patch_size", "embed_dim", "n_blocks", "n_heads", "expansion"});
  require(m["dropout"].get<double>() >= 0 && m["dropout"].get<double>() < 1, "model.dropout must be in [0, 1)");
  require(m["dtype"] == "f32" || m["dtype"] == "f64", "model.dtype must be f32 or f64");
  require(m["embed_dim"].get<int>() % m["n_heads"].get<int>() == 0, "model.embed_dim must be divisible by model.n_heads");

  json& p = c["pretext"];
  if (p["buffer"].is_null()) p["buffer"] = m["patch_size"].get<int>() / 4;
  require(p["buffer"].is_number_integer() && p["buffer"].get<int>() >= 0, "pretext.buffer must be a non-negative integer");
  require(p["loss_reduction"] == "mean" || p["loss_reduction"] == "sum", "pretext.loss_reduction must be mean or sum");
  require(p["holdout_fraction"].get<double>() >= 0 && p["holdout_fraction"].get<double>() < 1,
          "pretext.holdout_fraction must be in [0, 1)");
  require(!(p["no_image_rot"].get<bool>() && p["no_patch_rot"].get<bool>()),
          "pretext: no_image_rot and no_patch_rot together leave no task");
  require(!(p["share_patch_heads"].get<bool>() && p["reuse_mlp_head"].get<bool>()),
          "pretext: share_patch_heads and reuse_mlp_head are exclusive");

  json& o = c["optimizer"];
  check_positive(o, "optimizer", {"lr", "eps"});
  check_non_negative(o, "optimizer", {"weight_decay", "warmup_epochs", "min_lr"});
  for (const char* k : {"beta1", "beta2"}) {
    require(o[k].get<double>() >= 0 && o[k].get<double>() < 1, std::string("optimizer.") + k + " must be in [0, 1)");
  }

  json& pt = c["pretrain"];
  check_positive(pt, "pretrain", {"epochs", "batch_size"});
  check_non_negative(pt, "pretrain", {"eval_every", "checkpoint_every"});

  json& f = c["finetune"];
  check_non_negative(f, "finetune", {"epochs"});
  check_positive(f, "finetune", {"batch_size"});
  check_non_negative(f, "finetune", {"eval_every"});
  for (const char* k : {"lr", "weight_decay", "warmup_epochs"}) {
    if (f[k].is_null()) f[k] = o[k];
  }
  check_positive(f, "finetune", {"lr"});
  check_non_negative(f, "finetune", {"weight_decay", "warmup_epochs"});
  require(f["init"].is_string() && f["init"] != "", "finetune.init must be random, supervised, patchrot or a checkpoint path");
  try {
    const auto spec = vit::FreezeSpec::parse(f["freeze"]);
    require(spec.kind != vit::FreezeSpec::Kind::EB || spec.block <= m["n_blocks"].get<int>(),
            "finetune.freeze: model has only " + std::to_string(m["n_blocks"].get<int>()) + " blocks");
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("finetune.freeze: ") + e.what());
  }

  json& h = c["harness"];
  if (h["freeze_modes"] != "all") {
    for (const auto& s : string_list(h["freeze_modes"], "harness.freeze_modes")) {
      try {
        const auto spec = vit::FreezeSpec::parse(s);
        require(spec.kind != vit::FreezeSpec::Kind::EB || spec.block <= m["n_blocks"].get<int>(),
                "harness.freeze_modes: " + s + " exceeds the model depth");
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("harness.freeze_modes: ") + e.what());
      }
    }
  }
  if (h["variants"] != "all") {
    for (const auto& s : string_list(h["variants"], "harness.variants")) {
      try {
        eval::parse_variant(s);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("harness.variants: ") + e.what());
      }
    }
  }
  for (const auto& v : h["label_counts"]) require(v.is_number_integer() && v.get<int>() > 0, "harness.label_counts must hold positive integers");
  for (const auto& v : h["pretrain_epochs"]) require(v.is_number_integer() && v.get<int>() > 0, "harness.pretrain_epochs must hold positive integers");
  for (const auto& s : string_list(h["transfer_inits"], "harness.transfer_inits")) {
    require(s == "patchrot" || s == "supervised", "harness.transfer_inits: unknown init '" + s + "'");
  }
  require(h["attention"] == "cls" || h["attention"] == "rollout", "harness.attention must be cls or rollout");
  check_positive(h, "harness", {"attention_images"});
  return c;
}

std::string canonical(const json& config) { return config.dump(); }

std::string config_hash(const json& resolved, const std::string& command) {
  json doc = resolved;
  doc.erase("output_dir");
  doc["command"] = command;
  return fnv_hex(canonical(doc));
}

vit::ViTConfig model_config(const json& r, const data::Dataset& train) {
  const json& m = r.at("model");
  vit::ViTConfig cfg;
  cfg.image_c = train.meta.c;
  cfg.image_h = train.meta.h;
  cfg.image_w = train.meta.w;
  cfg.patch_size = m.at("patch_size");
  cfg.embed_dim = m.at("embed_dim");
  cfg.n_blocks = m.at("n_blocks");
  cfg.n_heads = m.at("n_heads");
  cfg.expansion = m.at("expansion");
  cfg.dropout = m.at("dropout");
  cfg.dtype = m.at("dtype") == "f64" ? DType::f64 : DType::f32;
  cfg.n_downstream_classes = train.meta.n_classes;
  cfg.share_patch_heads = r.at("pretext").at("share_patch_heads");
  cfg.reuse_m0_head = r.at("pretext").at("reuse_mlp_head");
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return cfg;
}

optim::PretrainConfig pretrain_config(const json& r) {
  const json& o = r.at("optimizer");
  const json& p = r.at("pretext");
  const json& pt = r.at("pretrain");
  optim::PretrainConfig c;
  c.epochs = pt.at("epochs");
  c.batch_size = pt.at("batch_size");
  c.seed = r.at("seed");
  c.adam = {o.at("lr"), o.at("weight_decay"), o.at("beta1"), o.at("beta2"), o.at("eps")};
  c.warmup_epochs = o.at("warmup_epochs");
  c.min_lr = o.at("min_lr");
  c.buffer = p.at("buffer");
  c.flags.no_image_rot = p.at("no_image_rot");
  c.flags.no_patch_rot = p.at("no_patch_rot");
  c.flags.rotate_img_and_patch = p.at("rotate_img_and_patch");
  c.flags.original_size = p.at("original_size");
  c.flags.force_zero_rotation = p.at("force_zero_rotation");
  c.loss_reduction = p.at("loss_reduction") == "sum" ? nn::Reduction::sum : nn::Reduction::mean;
  c.augment = augment_policy(r.at("dataset").at("augment"));
  c.holdout_fraction = p.at("holdout_fraction");
  c.eval_every = pt.at("eval_every");
  c.checkpoint_every = pt.at("checkpoint_every");
  c.run_config = r;
  return c;
}

optim::FinetuneConfig finetune_config(const json& r) {
  const json& o = r.at("optimizer");
  const json& f = r.at("finetune");
  optim::FinetuneConfig c;
  c.epochs = f.at("epochs");
  c.batch_size = f.at("batch_size");
  c.seed = r.at("seed");
  c.adam = {f.at("lr"), f.at("weight_decay"), o.at("beta1"), o.at("beta2"), o.at("eps")};
  c.warmup_epochs = f.at("warmup_epochs");
  c.min_lr = o.at("min_lr");
  c.freeze = vit::FreezeSpec::parse(f.at("freeze"));
  c.augment = augment_policy(r.at("dataset").at("augment"));
  c.eval_every = f.at("eval_every");
  return c;
}

eval::HarnessConfig harness_config(const json& r, const data::Dataset& train, const std::string& hash) {
  eval::HarnessConfig hc;
  hc.model = model_config(r, train);
  hc.pretrain = pretrain_config(r);
  hc.seed = r.at("seed");
  hc.sweep.finetune = finetune_config(r);
  hc.sweep.provenance = {hash, hc.seed};
  const json& modes = r.at("harness").at("freeze_modes");
  if (modes != "all") {
    for (const auto& s : string_list(modes, "harness.freeze_modes")) hc.sweep.modes.push_back(vit::FreezeSpec::parse(s));
  }
  return hc;
}

namespace {

std::vector<std::filesystem::path> paths_of(const json& list) {
  std::vector<std::filesystem::path> out;
  for (const auto& p : list) out.emplace_back(p.get<std::string>());
  return out;
}

void require_files(const std::vector<std::filesystem::path>& files) {
  for (const auto& f : files) {
    if (!std::filesystem::exists(f)) throw data::DataError("dataset file not found: " + f.string());
  }
}

data::Dataset load_split(const json& d, const json& files) {
  const std::string kind = d.at("kind");
  const auto paths = paths_of(files);
  require_files(paths);
  if (kind == "cifar10" || kind == "cifar100") return data::load_cifar_binary(paths, d.at("n_classes").get<int>());
  if (kind == "idx") return data::load_idx(paths.at(0), paths.at(1), d.at("n_classes").get<int>());
  return data::load_raw_archive(paths.at(0));
}

data::Dataset limited(const data::Dataset& ds, std::int64_t limit) {
  if (limit <= 0 || limit >= ds.size()) return ds;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(limit));
  for (std::int64_t i = 0; i < limit; ++i) idx[i] = i;
  return ds.subset(idx);
}

}  // namespace

DataSplit load_data(const json& d) {
  DataSplit split;
  const std::string kind = d.at("kind");
  if (kind == "synthetic") {
    const json& s = d.at("synthetic");
    const std::int64_t n_train = s.at("n_train"), n_test = s.at("n_test");
    const int size = s.at("size");
    auto all = data::gen_synthetic_oriented(n_train + n_test, size, size, s.at("seed").get<std::uint64_t>());
    std::vector<std::int64_t> tr(static_cast<std::size_t>(n_train)), te(static_cast<std::size_t>(n_test));
    for (std::int64_t i = 0; i < n_train; ++i) tr[i] = i;
    for (std::int64_t i = 0; i < n_test; ++i) te[i] = n_train + i;
    split.train = all.subset(tr);
    split.test = all.subset(te);
  } else {
    split.train = load_split(d, d.at("train"));
    if (d.at("test").empty()) {
      // No test files: hold out the last sixth of the training set.
      const std::int64_t n = split.train.size(), n_test = std::max<std::int64_t>(1, n / 6);
      std::vector<std::int64_t> tr, te;
      for (std::int64_t i = 0; i < n; ++i) (i < n - n_test ? tr : te).push_back(i);
      data::Dataset all = split.train;
      split.train = all.subset(tr);
      split.test = all.subset(te);
    } else {
      split.test = load_split(d, d.at("test"));
    }
  }
  split.train = limited(split.train, d.at("limit_train"));
  split.test = limited(split.test, d.at("limit_test"));
  const std::string name = d.at("name");
  split.train.meta.name = name;
  split.test.meta.name = name;
  if (split.train.meta.c != split.test.meta.c || split.train.meta.h != split.test.meta.h ||
      split.train.meta.w != split.test.meta.w) {
    throw data::DataError("train and test images differ in shape");
  }
  split.train.meta.augment_policy = d.at("augment");
  split.test.meta.augment_policy = d.at("augment");
  data::compute_channel_stats(split.train);
  split.test.meta.channel_mean = split.train.meta.channel_mean;
  split.test.meta.channel_std = split.train.meta.channel_std;
  return split;
}

}  // namespace patchrot::cli
