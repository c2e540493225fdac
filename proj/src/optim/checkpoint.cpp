#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "patchrot/optim.hpp"

namespace patchrot::optim {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written as native little-endian");

namespace {

constexpr char kMagic[] = "PRCKPT1\n";
constexpr std::size_t kMagicSize = sizeof(kMagic) - 1;
constexpr int kFormatVersion = 1;

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::size_t element_size(DType d) { return d == DType::f32 ? 4 : 8; }

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw CheckpointError("checkpoint: unknown dtype '" + s + "'");
}

void append_bytes(std::string& payload, const Tensor& t) {
  if (t.dtype() == DType::f32) {
    auto d = t.data<float>();
    payload.append(reinterpret_cast<const char*>(d.data()), d.size_bytes());
  } else {
    auto d = t.data<double>();
    payload.append(reinterpret_cast<const char*>(d.data()), d.size_bytes());
  }
}

Tensor tensor_from_bytes(const CheckpointEntry& e, const char* bytes) {
  const auto n = static_cast<std::size_t>(numel_of(e.shape));
  if (e.dtype == DType::f32) {
    std::vector<float> v(n);
    std::memcpy(v.data(), bytes, n * sizeof(float));
    return Tensor::from_vector(e.shape, std::move(v));
  }
  std::vector<double> v(n);
  std::memcpy(v.data(), bytes, n * sizeof(double));
  return Tensor::from_vector(e.shape, std::move(v));
}

Tensor moments_tensor(const std::vector<double>& values, const Shape& shape) {
  return Tensor::from_vector(shape, std::vector<double>(values));
}

}  // namespace

nlohmann::json to_json(const vit::ViTConfig& cfg) {
  return {
      {"image_c", cfg.image_c},
      {"image_h", cfg.image_h},
      {"image_w", cfg.image_w},
      {"patch_size", cfg.patch_size},
      {"embed_dim", cfg.embed_dim},
      {"n_blocks", cfg.n_blocks},
      {"n_heads", cfg.n_heads},
      {"expansion", cfg.expansion},
      {"dropout", cfg.dropout},
      {"n_rotation_classes", cfg.n_rotation_classes},
      {"n_downstream_classes", cfg.n_downstream_classes},
      {"share_patch_heads", cfg.share_patch_heads},
      {"reuse_m0_head", cfg.reuse_m0_head},
      {"dtype", dtype_name(cfg.dtype)},
  };
}

vit::ViTConfig vit_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("model config must be an object");
  vit::ViTConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "image_c") cfg.image_c = value.get<int>();
    else if (key == "image_h") cfg.image_h = value.get<int>();
    else if (key == "image_w") cfg.image_w = value.get<int>();
    else if (key == "patch_size") cfg.patch_size = value.get<int>();
    else if (key == "embed_dim") cfg.embed_dim = value.get<int>();
    else if (key == "n_blocks") cfg.n_blocks = value.get<int>();
    else if (key == "n_heads") cfg.n_heads = value.get<int>();
    else if (key == "expansion") cfg.expansion = value.get<int>();
    else if (key == "dropout") cfg.dropout = value.get<double>();
    else if (key == "n_rotation_classes") cfg.n_rotation_classes = value.get<int>();
    else if (key == "n_downstream_classes") cfg.n_downstream_classes = value.get<int>();
    else if (key == "share_patch_heads") cfg.share_patch_heads = value.get<bool>();
    else if (key == "reuse_m0_head") cfg.reuse_m0_head = value.get<bool>();
    else if (key == "dtype") {
      const auto s = value.get<std::string>();
      if (s != "f32" && s != "f64") throw std::invalid_argument("model.dtype must be f32 or f64, got '" + s + "'");
      cfg.dtype = s == "f32" ? DType::f32 : DType::f64;
    } else {
      throw std::invalid_argument("unknown model key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

void save_checkpoint(const std::filesystem::path& path, const vit::ViTModel& model, int epoch,
                     const nlohmann::json& run_config, const AdamW* optimizer) {
  std::string payload;
  nlohmann::json entries = nlohmann::json::array();
  auto add = [&](const std::string& name, const Tensor& t, bool trainable) {
    const std::uint64_t offset = payload.size();
    append_bytes(payload, t);
    entries.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"dtype", dtype_name(t.dtype())},
                       {"offset", offset},
                       {"length", payload.size() - offset},
                       {"trainable", trainable}});
  };
  for (const auto& p : model.parameters()) add(p.name, p.tensor, p.trainable());
  if (optimizer) {
    for (const auto& s : optimizer->slots()) {
      add("adamw.m/" + s.param.name, moments_tensor(s.m, s.param.tensor.shape()), false);
      add("adamw.v/" + s.param.name, moments_tensor(s.v, s.param.tensor.shape()), false);
    }
  }
  nlohmann::json manifest = {
      {"format_version", kFormatVersion},
      {"epoch", epoch},
      {"model", to_json(model.config())},
      {"layout",
       {{"grid_rows", model.grid().rows},
        {"grid_cols", model.grid().cols},
        {"head_classes", model.head_classes()},
        {"patch_heads", vit::to_string(model.patch_head_kind())}}},
      {"run_config", run_config},
      {"optimizer_step", optimizer ? optimizer->step_count() : -1},
      {"tensors", entries},
      {"payload_bytes", payload.size()},
      {"payload_fnv1a64", hex64(fnv1a(payload.data(), payload.size()))},
  };
  const std::string text = manifest.dump(1) + "\n";
  const std::uint64_t len = text.size();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot write " + tmp.string());
    out.write(kMagic, kMagicSize);
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw CheckpointError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < kMagicSize || bytes.compare(0, kMagicSize, kMagic) != 0) {
    throw CheckpointError("checkpoint: " + path.string() + " is not a PRCKPT1 file (bad magic)");
  }
  if (bytes.size() < kMagicSize + 8) throw CheckpointError("checkpoint: truncated header in " + path.string());
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + kMagicSize, 8);
  const std::size_t manifest_at = kMagicSize + 8;
  if (len > bytes.size() - manifest_at) throw CheckpointError("checkpoint: truncated manifest in " + path.string());

  nlohmann::json m;
  try {
    m = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(manifest_at),
                              bytes.begin() + static_cast<std::ptrdiff_t>(manifest_at + len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  try {
    if (m.at("format_version").get<int>() != kFormatVersion) {
      throw CheckpointError("checkpoint: unsupported format_version " + m.at("format_version").dump());
    }
    ck.epoch = m.at("epoch").get<int>();
    ck.config = vit_config_from_json(m.at("model"));
    const auto& layout = m.at("layout");
    ck.grid = {layout.at("grid_rows").get<int>(), layout.at("grid_cols").get<int>()};
    ck.head_classes = layout.at("head_classes").get<int>();
    ck.patch_heads = vit::parse_patch_head_kind(layout.at("patch_heads").get<std::string>());
    ck.run_config = m.at("run_config");
    ck.optimizer_step = m.at("optimizer_step").get<std::int64_t>();
    for (const auto& e : m.at("tensors")) {
      CheckpointEntry entry;
      entry.name = e.at("name").get<std::string>();
      entry.shape = e.at("shape").get<Shape>();
      entry.dtype = parse_dtype(e.at("dtype").get<std::string>());
      entry.offset = e.at("offset").get<std::uint64_t>();
      entry.length = e.at("length").get<std::uint64_t>();
      entry.trainable = e.at("trainable").get<bool>();
      ck.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed manifest: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: malformed manifest: ") + e.what());
  }

  const std::uint64_t payload_bytes = m.at("payload_bytes").get<std::uint64_t>();
  const std::size_t payload_at = manifest_at + len;
  const std::uint64_t found = bytes.size() - payload_at;
  if (found < payload_bytes) {
    throw CheckpointError("checkpoint: truncated payload in " + path.string() + ": expected " +
                          std::to_string(payload_bytes) + " bytes, found " + std::to_string(found));
  }
  if (found > payload_bytes) {
    throw CheckpointError("checkpoint: " + std::to_string(found - payload_bytes) + " trailing bytes after payload");
  }

  // Entries must tile the payload exactly, in order.
  std::uint64_t cursor = 0;
  std::set<std::string> names;
  for (const auto& e : ck.entries) {
    if (!names.insert(e.name).second) throw CheckpointError("checkpoint: duplicate tensor '" + e.name + "'");
    if (e.offset != cursor) {
      throw CheckpointError("checkpoint: tensor '" + e.name + "' at offset " + std::to_string(e.offset) +
                            ", expected " + std::to_string(cursor) + " (overlap or gap)");
    }
    const std::uint64_t want = static_cast<std::uint64_t>(numel_of(e.shape)) * element_size(e.dtype);
    if (e.length != want) {
      throw CheckpointError("checkpoint: tensor '" + e.name + "' has " + std::to_string(e.length) +
                            " bytes, shape needs " + std::to_string(want));
    }
    cursor += e.length;
  }
  if (cursor != payload_bytes) {
    throw CheckpointError("checkpoint: manifest covers " + std::to_string(cursor) + " of " +
                          std::to_string(payload_bytes) + " payload bytes");
  }
  const char* payload = bytes.data() + payload_at;
  if (hex64(fnv1a(payload, payload_bytes)) != m.at("payload_fnv1a64").get<std::string>()) {
    throw CheckpointError("checkpoint: payload checksum mismatch in " + path.string());
  }
  for (const auto& e : ck.entries) ck.tensors.emplace(e.name, tensor_from_bytes(e, payload + e.offset));
  return ck;
}

void load_parameters(vit::ViTModel& model, const Checkpoint& ckpt) {
  std::vector<std::string> problems;
  std::set<std::string> seen;
  std::map<std::string, bool> trainable;
  for (const auto& e : ckpt.entries) trainable[e.name] = e.trainable;
  model.visit_parameters([&](const std::string& name, Tensor& t) {
    seen.insert(name);
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
      problems.push_back(name + ": missing from checkpoint (model " + shape_str(t.shape()) + ")");
    } else if (it->second.shape() != t.shape()) {
      problems.push_back(name + ": checkpoint " + shape_str(it->second.shape()) + " vs model " + shape_str(t.shape()));
    }
  });
  for (const auto& e : ckpt.entries) {
    if (e.name.rfind("adamw.", 0) == 0) continue;
    if (!seen.count(e.name)) problems.push_back(e.name + ": not a parameter of this model");
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match model:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw CheckpointError(msg);
  }
  model.visit_parameters([&](const std::string& name, Tensor& t) {
    t.assign(ckpt.tensors.at(name));
    t.set_requires_grad(trainable.at(name));
  });
}

vit::ViTModel model_from_checkpoint(const Checkpoint& ckpt) {
  Rng rng(0);
  vit::ViTModel model = vit::ViTModel::with_layout(ckpt.config, ckpt.grid, ckpt.head_classes, ckpt.patch_heads, rng);
  load_parameters(model, ckpt);
  return model;
}

void load_optimizer(AdamW& optimizer, const Checkpoint& ckpt) {
  if (ckpt.optimizer_step < 0) throw CheckpointError("checkpoint: no optimizer state saved");
  std::map<std::string, std::pair<Tensor, Tensor>> moments;
  for (const auto& s : optimizer.slots()) {
    auto m = ckpt.tensors.find("adamw.m/" + s.param.name);
    auto v = ckpt.tensors.find("adamw.v/" + s.param.name);
    if (m == ckpt.tensors.end() || v == ckpt.tensors.end()) {
      throw CheckpointError("checkpoint: no optimizer moments for '" + s.param.name + "'");
    }
    moments.emplace(s.param.name, std::make_pair(m->second, v->second));
  }
  optimizer.load_state(ckpt.optimizer_step, moments);
}

}  // namespace patchrot::optim
