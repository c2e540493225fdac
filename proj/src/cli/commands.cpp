#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "patchrot/cli.hpp"
#include "patchrot/diagnostics.hpp"

namespace patchrot::cli {

namespace {

namespace fs = std::filesystem;

struct Options {
  std::string command;
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::int64_t> seed;
  std::optional<std::string> output_dir;
  std::optional<std::string> dataset;
  std::vector<std::string> data;
  std::vector<std::string> test_data;
  std::optional<int> patch;
  std::optional<int> buffer;
  std::optional<int> epochs;
  std::optional<int> pretrain_epochs;
  std::optional<int> finetune_epochs;
  std::optional<double> lr;
  std::optional<int> batch_size;
  std::optional<std::string> checkpoint;
  std::optional<std::string> init;
  std::optional<std::string> freeze;
  std::optional<std::string> labels;
  std::optional<std::string> variants;
  std::optional<std::string> epochs_list;
  std::optional<std::string> inits;
  std::optional<std::string> method;
  std::optional<int> count;
  // convert
  std::string kind;
  std::vector<std::string> inputs;
  std::string out_path;
  int n_classes = 0;
  // ckptdiff
  std::string ckpt_a;
  std::string ckpt_b;
  // selftest
  std::string inject_bug;
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

json int_list(const std::string& text, const std::string& flag) {
  json out = json::array();
  for (const auto& s : split_list(text)) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError(flag + ": '" + s + "' is not an integer");
    }
  }
  return out;
}

bool is_pretrain_phase(const std::string& command) { return command == "pretrain"; }

// Dedicated flags, applied after --set.
void apply_flags(json& c, const Options& o) {
  const std::string& cmd = o.command;
  if (o.seed) c["seed"] = *o.seed;
  if (o.output_dir) c["output_dir"] = *o.output_dir;
  if (o.dataset) c["dataset"]["kind"] = *o.dataset;
  if (!o.data.empty()) c["dataset"]["train"] = o.data;
  if (!o.test_data.empty()) c["dataset"]["test"] = o.test_data;
  if (o.patch) c["model"]["patch_size"] = *o.patch;
  if (o.buffer) c["pretext"]["buffer"] = *o.buffer;
  if (o.pretrain_epochs) c["pretrain"]["epochs"] = *o.pretrain_epochs;
  if (o.finetune_epochs) c["finetune"]["epochs"] = *o.finetune_epochs;
  if (o.epochs) c[is_pretrain_phase(cmd) ? "pretrain" : "finetune"]["epochs"] = *o.epochs;
  if (o.lr) {
    if (is_pretrain_phase(cmd)) c["optimizer"]["lr"] = *o.lr; else c["finetune"]["lr"] = *o.lr;
  }
  if (o.batch_size) c[is_pretrain_phase(cmd) ? "pretrain" : "finetune"]["batch_size"] = *o.batch_size;
  if (o.checkpoint) c["finetune"]["init"] = *o.checkpoint;
  if (o.init) c["finetune"]["init"] = *o.init;
  if (o.freeze) {
    if (cmd == "sweep" || cmd == "semisup" || cmd == "transfer" || cmd == "ablate" || cmd == "epochsweep") {
      c["harness"]["freeze_modes"] = split_list(*o.freeze);
    } else {
      c["finetune"]["freeze"] = *o.freeze;
    }
  }
  if (o.labels) c["harness"]["label_counts"] = int_list(*o.labels, "--labels");
  if (o.variants) c["harness"]["variants"] = split_list(*o.variants);
  if (o.epochs_list) c["harness"]["pretrain_epochs"] = int_list(*o.epochs_list, "--epochs-list");
  if (o.inits) c["harness"]["transfer_inits"] = split_list(*o.inits);
  if (o.method) c["harness"]["attention"] = *o.method;
  if (o.count) c["harness"]["attention_images"] = *o.count;
}

json load_config(const Options& o) {
  json c = default_config();
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw ConfigError("cannot read config " + o.config_path);
    json file = json::parse(in, nullptr, false);
    if (file.is_discarded()) throw ConfigError("config " + o.config_path + " is not valid JSON");
    merge_config(c, file);
  }
  for (const auto& s : o.sets) apply_override(c, s);
  // Dedicated flags go through the same type checks as the file.
  json flags = default_config();
  apply_flags(c, o);
  merge_config(flags, c);
  if (o.command == "probe") {
    if (o.freeze && *o.freeze != "MLP") throw ConfigError("probe always uses --freeze MLP");
    c["finetune"]["freeze"] = "MLP";
  }
  return resolve_config(c);
}

struct Run {
  json config;
  std::string hash;
  fs::path dir;
  DataSplit data;
  std::ostream* out = nullptr;

  void log(const std::string& line) const { *out << line << std::endl; }
  optim::LogSink sink() const {
    return [this](const std::string& line) { log(line); };
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

Run start_run(const Options& o, std::ostream& out) {
  Run r;
  r.out = &out;
  r.config = load_config(o);
  r.data = load_data(r.config["dataset"]);
  r.hash = config_hash(r.config, o.command);
  r.dir = fs::path(r.config["output_dir"].get<std::string>()) / r.hash;
  for (const char* sub : {"checkpoints", "reports"}) fs::create_directories(r.dir / sub);
  write_text(r.dir / "config.resolved", r.config.dump(2) + "\n");
  r.log("run " + r.hash + " -> " + r.dir.string());
  r.log("dataset " + r.data.train.meta.name + ": " + std::to_string(r.data.train.size()) + " train / " +
        std::to_string(r.data.test.size()) + " test, " + std::to_string(r.data.train.meta.c) + "x" +
        std::to_string(r.data.train.meta.h) + "x" + std::to_string(r.data.train.meta.w) + ", " +
        std::to_string(r.data.train.meta.n_classes) + " classes");
  return r;
}

eval::HarnessConfig harness_of(const Run& r) {
  eval::HarnessConfig hc = harness_config(r.config, r.data.train, r.hash);
  hc.pretrain.log = r.sink();
  hc.sweep.finetune.log = r.sink();
  return hc;
}

optim::Checkpoint read_checkpoint_file(const std::string& path) {
  if (!fs::exists(path)) throw optim::CheckpointError("checkpoint not found: " + path);
  return optim::read_checkpoint(path);
}

// Downstream-ready model for finetune.init.
vit::ViTModel initial_model(const Run& r, optim::MetricsLog* metrics) {
  const std::string init = r.config["finetune"]["init"];
  eval::HarnessConfig hc = harness_of(r);
  const int n_classes = r.data.train.meta.n_classes;
  if (init == "random") return eval::random_downstream(hc.model, n_classes, hc.seed);
  if (init == "supervised") {
    optim::FinetuneResult res;
    auto m = eval::supervised_model(r.data.train, r.data.test, hc, &res);
    if (metrics) metrics->append(res.metrics, "supervised/");
    return m;
  }
  if (init == "patchrot") {
    optim::PretrainResult res;
    auto m = eval::pretrained_downstream(r.data.train, n_classes, hc, &res);
    if (metrics) metrics->append(res.metrics, "pretrain/");
    return m;
  }
  const auto ckpt = read_checkpoint_file(init);
  vit::ViTModel model = optim::model_from_checkpoint(ckpt);
  const auto& mc = model.config();
  if (mc.image_c != r.data.train.meta.c || mc.image_h != r.data.train.meta.h || mc.image_w != r.data.train.meta.w) {
    throw data::DataError("checkpoint " + init + " expects " + std::to_string(mc.image_c) + "x" +
                          std::to_string(mc.image_h) + "x" + std::to_string(mc.image_w) + " images");
  }
  if (model.patch_head_kind() != vit::PatchHeadKind::none || !(model.grid() == vit::full_grid(mc))) {
    return optim::downstream_from_pretrained(model, n_classes, hc.seed);
  }
  if (model.head_classes() != n_classes) {
    Rng rng = Rng::derive(hc.seed, "downstream/head");
    model.replace_head(n_classes, rng);
  }
  return model;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

// ---- commands ------------------------------------------------------------------------

int cmd_pretrain(const Options& o, std::ostream& out) {
  Run r = start_run(o, out);
  eval::HarnessConfig hc = harness_of(r);
  vit::ViTModel model = eval::make_pretraining_model(hc.model, hc.pretrain.buffer, hc.pretrain.flags, hc.seed);
  hc.pretrain.checkpoint_dir = r.dir / "checkpoints";
  hc.pretrain.seed = hc.seed;
  const auto res = optim::pretrain(model, r.data.train, hc.pretrain);
  res.metrics.write(r.dir / "metrics.csv");
  optim::save_checkpoint(r.dir / "checkpoints" / "final.prckpt", model, hc.pretrain.epochs, r.config);
  r.log("held-out image-rot " + fmt(res.heldout.image()) + " patch-rot " + fmt(res.heldout.mean_patch()));
  r.log("checkpoint " + (r.dir / "checkpoints" / "final.prckpt").string());
  return kOk;
}

int cmd_finetune(const Options& o, std::ostream& out) {
  Run r = start_run(o, out);
  optim::MetricsLog metrics;
  vit::ViTModel model = initial_model(r, &metrics);
  optim::FinetuneConfig fc = finetune_config(r.config);
  fc.log = r.sink();
  const auto res = optim::finetune(model, r.data.train, r.data.test, fc);
  metrics.append(res.metrics);
  metrics.write(r.dir / "metrics.csv");
  optim::save_checkpoint(r.dir / "checkpoints" / "final.prckpt", model, fc.epochs, r.config);
  r.log("test top1 " + fmt(res.top1) + " top5 " + fmt(res.top5));
  r.log("checkpoint " + (r.dir / "checkpoints" / "final.prckpt").string());
  return kOk;
}

int cmd_sweep(const Options& o, std::ostream& out) {
  Run r = start_run(o, out);
  optim::MetricsLog metrics;
  const vit::ViTModel init = initial_model(r, &metrics);
  eval::HarnessConfig hc = harness_of(r);
  hc.sweep.finetune.seed = hc.seed;
  const auto report = eval::run_freeze_sweep(init, r.config["finetune"]["init"], r.data.train, r.data.test, hc.sweep);
  metrics.append(report.metrics);
  metrics.write(r.dir / "metrics.csv");
  write_text(r.dir / "reports" / "sweep.csv", eval::sweep_csv({report}));
  for (std::size_t i = 0; i < report.modes.size(); ++i) {
    r.log(report.modes[i].to_string() + " top1 " + fmt(report.top1[i]) + " top5 " + fmt(report.top5[i]));
  }
  return kOk;
}

int cmd_semisup(const Options& o, std::ostream& out) {
  Run r = start_run(o, out);
  const auto hc = harness_of(r);
  std::vector<std::int64_t> counts;
  for (const auto& v : r.config["harness"]["label_counts"]) counts.push_back(v);
  const auto report = eval::run_semisupervised(r.data.train, r.data.test, counts, hc);
  optim::MetricsLog metrics;
  for (const auto& row : report.rows) metrics.append(row.sweep.metrics, std::to_string(row.labels) + "/");
  metrics.write(r.dir / "metrics.csv");
  write_text(r.dir / "reports" / "semisup.csv", report.csv());
  out << report.csv();
  return kOk;
}

int cmd_transfer(const Options& o, std::ostream& out) {
  Run r = start_run(o, out);
  const auto hc = harness_of(r);
  const DataSplit source = load_data(r.config["harness"]["source"]);
  std::vector<eval::TransferInit> inits;
  for (const auto& s : r.config["harness"]["transfer_inits"]) inits.push_back(eval::parse_transfer_init(s));
  const auto report = eval::run_transfer(source.train, r.data.train, r.data.test, inits, hc);
  optim::MetricsLog metrics;
  for (const auto& s : report.sweeps) metrics.append(s.metrics, s.init + "/");
  metrics.write(r.dir / "metrics.csv");
  write_text(r.dir / "reports" / "transfer.csv", report.csv());
  out << report.csv();
  return kOk;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  Run r = start_run(o, out);
  const auto hc = harness_of(r);
  std::vector<eval::Variant> variants;
  const json& v = r.config["harness"]["variants"];
  if (v == "all") {
    variants = eval::all_variants();
  } else if (v.is_string()) {
    variants.push_back(eval::parse_variant(v));
  } else {
    for (const auto& s : v) variants.push_back(eval::parse_variant(s));
  }
  const auto report = eval::run_ablations(r.data.train, r.data.test, variants, hc);
  optim::MetricsLog metrics;
  std::string pretext = "variant,patch_head_parameters,patch_samples,heldout_image_rot,heldout_patch_rot\n";
  for (const auto& row : report.rows) {
    metrics.append(row.sweep.metrics, eval::to_string(row.variant) + "/");
    pretext += eval::to_string(row.variant) + "," + std::to_string(row.patch_head_parameters) + "," +
               std::to_string(row.patch_samples) + "," + fmt(row.heldout.image()) + "," + fmt(row.heldout.mean_patch()) + "\n";
  }
  metrics.write(r.dir / "metrics.csv");
  write_text(r.dir / "reports" / "ablations.csv", report.csv());
  write_text(r.dir / "reports" / "ablations_pretext.csv", pretext);
  out << report.csv();
  return kOk;
}

int cmd_epochsweep(const Options& o, std::ostream& out) {
  Run r = start_run(o, out);
  const auto hc = harness_of(r);
  std::vector<int> epochs;
  for (const auto& v : r.config["harness"]["pretrain_epochs"]) epochs.push_back(v);
  const auto report = eval::run_epoch_sweep(r.data.train, r.data.test, epochs, hc);
  optim::MetricsLog metrics;
  for (const auto& row : report.rows) metrics.append(row.sweep.metrics, std::to_string(row.epochs) + "/");
  metrics.write(r.dir / "metrics.csv");
  write_text(r.dir / "reports" / "epoch_sweep.csv", report.csv());
  out << report.csv();
  return kOk;
}

void write_ppm(const fs::path& path, const data::Dataset& ds, std::int64_t index) {
  const auto span = ds.image_span(index);
  const int h = ds.meta.h, w = ds.meta.w, c = ds.meta.c;
  std::string text = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        const float v = span[static_cast<std::size_t>((std::min(ch, c - 1) * h + y) * w + x)];
        text.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0f, 1.0f)))));
      }
    }
  }
  write_text(path, text);
}

int cmd_attmap(const Options& o, std::ostream& out) {
  Run r = start_run(o, out);
  const vit::ViTModel model = initial_model(r, nullptr);
  const auto method = eval::parse_attention_method(r.config["harness"]["attention"]);
  const std::int64_t n = std::min<std::int64_t>(r.config["harness"]["attention_images"].get<std::int64_t>(), r.data.test.size());
  fs::create_directories(r.dir / "attmaps");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[i] = i;
  const auto maps = eval::attention_maps(model, optim::prepare_images(r.data.test, idx), method);
  for (std::int64_t i = 0; i < n; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "img_%03lld", static_cast<long long>(i));
    eval::write_pgm(r.dir / "attmaps" / (std::string(stem) + ".pgm"), maps[i]);
    eval::write_grid_csv(r.dir / "attmaps" / (std::string(stem) + ".csv"), maps[i]);
    write_ppm(r.dir / "attmaps" / (std::string(stem) + "_input.ppm"), r.data.test, i);
  }
  r.log("wrote " + std::to_string(n) + " attention maps to " + (r.dir / "attmaps").string());
  return kOk;
}

int cmd_convert(const Options& o, std::ostream& out) {
  std::vector<fs::path> inputs(o.inputs.begin(), o.inputs.end());
  for (const auto& p : inputs) {
    if (!fs::exists(p)) throw data::DataError("input not found: " + p.string());
  }
  data::Dataset ds;
  if (o.kind == "cifar10" || o.kind == "cifar100") {
    ds = data::load_cifar_binary(inputs, o.n_classes ? o.n_classes : (o.kind == "cifar100" ? 100 : 10));
  } else if (o.kind == "idx") {
    if (inputs.size() != 2) throw ConfigError("convert --kind idx needs --input <images> <labels>");
    ds = data::load_idx(inputs[0], inputs[1], o.n_classes ? o.n_classes : 10);
  } else if (o.kind == "primg") {
    if (inputs.size() != 1) throw ConfigError("convert --kind primg takes one archive");
    ds = data::load_raw_archive(inputs[0]);
  } else {
    throw ConfigError("convert: unknown --kind '" + o.kind + "' (cifar10, cifar100, idx, primg)");
  }
  data::save_raw_archive(ds, o.out_path);
  std::vector<std::int64_t> hist(static_cast<std::size_t>(ds.meta.n_classes), 0);
  for (int l : ds.labels) ++hist[static_cast<std::size_t>(l)];
  out << "n=" << ds.size() << " shape=" << ds.meta.c << "x" << ds.meta.h << "x" << ds.meta.w
      << " classes=" << ds.meta.n_classes << "\nhistogram:";
  for (std::size_t k = 0; k < hist.size(); ++k) out << " " << k << ":" << hist[k];
  out << "\nwrote " << o.out_path << "\n";
  return kOk;
}

int cmd_ckptdiff(const Options& o, std::ostream& out) {
  const auto a = read_checkpoint_file(o.ckpt_a);
  const auto b = read_checkpoint_file(o.ckpt_b);
  int changed = 0, same = 0, unmatched = 0;
  for (const auto& [name, ta] : a.tensors) {
    const auto it = b.tensors.find(name);
    if (it == b.tensors.end()) {
      out << "only-in-a  " << name << "\n";
      ++unmatched;
    } else if (ta.shape() != it->second.shape() || ta.dtype() != it->second.dtype()) {
      out << "reshaped   " << name << " " << shape_str(ta.shape()) << " -> " << shape_str(it->second.shape()) << "\n";
      ++unmatched;
    } else if (bit_equal(ta, it->second)) {
      out << "same       " << name << "\n";
      ++same;
    } else {
      char buf[64];
      std::snprintf(buf, sizeof(buf), " max|diff| %.3g", max_abs_diff(ta, it->second));
      out << "changed    " << name << buf << "\n";
      ++changed;
    }
  }
  for (const auto& [name, tb] : b.tensors) {
    if (!a.tensors.count(name)) {
      out << "only-in-b  " << name << "\n";
      ++unmatched;
    }
  }
  out << changed << " changed, " << same << " same, " << unmatched << " unmatched\n";
  return kOk;
}

int cmd_selftest(const Options& o, std::ostream& out) {
  if (!o.inject_bug.empty()) {
    // primitive[:scale]
    const auto colon = o.inject_bug.find(':');
    const std::string prim = o.inject_bug.substr(0, colon);
    const double scale = colon == std::string::npos ? 1.5 : std::stod(o.inject_bug.substr(colon + 1));
    debug::set_gradient_fault(prim, scale);
    out << "injected gradient fault: " << prim << " x" << scale << "\n";
  }
  const auto checks = diagnostics::run_all();
  debug::set_gradient_fault("", 1.0);
  out << diagnostics::format_table(checks);
  return diagnostics::all_passed(checks) ? kOk : kRuntimeError;
}

void add_run_options(CLI::App* sub, Options& o) {
  sub->add_option("config", o.config_path, "JSON run config");
  sub->add_option("--set", o.sets, "section.key=value override (repeatable)");
  sub->add_option("--seed", o.seed, "seed");
  sub->add_option("--output-dir", o.output_dir, "parent of the run directory");
  sub->add_option("--dataset", o.dataset, "dataset kind: synthetic, cifar10, cifar100, idx, primg");
  sub->add_option("--data", o.data, "training files");
  sub->add_option("--test-data", o.test_data, "test files");
  sub->add_option("--P", o.patch, "patch size");
  sub->add_option("--B", o.buffer, "buffer gap");
  sub->add_option("--epochs", o.epochs, "epochs of the command's main phase");
  sub->add_option("--pretrain-epochs", o.pretrain_epochs, "pretraining epochs");
  sub->add_option("--finetune-epochs", o.finetune_epochs, "fine-tuning epochs");
  sub->add_option("--lr", o.lr, "learning rate of the command's main phase");
  sub->add_option("--batch-size", o.batch_size, "batch size of the command's main phase");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"PatchRot pretraining and evaluation for ViT-Lite", "patchrot"};
  app.require_subcommand(1, 1);
  struct Cmd {
    const char* name;
    const char* help;
    int (*fn)(const Options&, std::ostream&);
  };
  const std::vector<Cmd> run_cmds = {
      {"pretrain", "PatchRot pretraining", cmd_pretrain},
      {"finetune", "fine-tune from finetune.init", cmd_finetune},
      {"probe", "linear probe (freeze MLP)", cmd_finetune},
      {"sweep", "fine-tune under each freeze mode", cmd_sweep},
      {"semisup", "semi-supervised label-count table", cmd_semisup},
      {"transfer", "transfer from harness.source", cmd_transfer},
      {"ablate", "ablation variants", cmd_ablate},
      {"epochsweep", "pretraining-length sweep", cmd_epochsweep},
      {"attmap", "attention maps of test images", cmd_attmap},
  };
  std::map<CLI::App*, const Cmd*> by_app;
  for (const auto& c : run_cmds) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_run_options(sub, o);
    const std::string name = c.name;
    if (name != "pretrain") {
      sub->add_option("--checkpoint", o.checkpoint, "initialize from a checkpoint");
      sub->add_option("--init", o.init, "random, supervised or patchrot");
      sub->add_option("--freeze", o.freeze, "freeze mode(s): NF, PE, EB<k>, MLP");
    }
    if (name == "semisup") sub->add_option("--labels", o.labels, "comma-separated label counts");
    if (name == "ablate") sub->add_option("--variants", o.variants, "comma-separated variants");
    if (name == "epochsweep") sub->add_option("--epochs-list", o.epochs_list, "comma-separated pretraining lengths");
    if (name == "transfer") sub->add_option("--inits", o.inits, "patchrot,supervised");
    if (name == "attmap") {
      sub->add_option("--method", o.method, "cls or rollout");
      sub->add_option("--count", o.count, "number of test images");
    }
    by_app[sub] = &c;
  }
  CLI::App* convert = app.add_subcommand("convert", "convert a dataset to a PRIMG1 archive");
  convert->add_option("--kind", o.kind, "cifar10, cifar100, idx or primg")->required();
  convert->add_option("--input", o.inputs, "input files")->required();
  convert->add_option("--out", o.out_path, "output archive")->required();
  convert->add_option("--n-classes", o.n_classes, "number of classes");
  CLI::App* diff = app.add_subcommand("ckptdiff", "compare the tensors of two checkpoints");
  diff->add_option("a", o.ckpt_a, "checkpoint")->required();
  diff->add_option("b", o.ckpt_b, "checkpoint")->required();
  CLI::App* self = app.add_subcommand("selftest", "gradient, rotation, geometry and loss checks");
  self->add_option("--inject-bug", o.inject_bug, "primitive[:scale] gradient fault (debug)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    for (const auto& [sub, cmd] : by_app) {
      if (sub->parsed()) {
        o.command = sub->get_name();
        return cmd->fn(o, out);
      }
    }
    if (convert->parsed()) return cmd_convert(o, out);
    if (diff->parsed()) return cmd_ckptdiff(o, out);
    if (self->parsed()) return cmd_selftest(o, out);
    err << "error: no command\n";
    return kConfigError;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const data::DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const optim::CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}

}  // namespace patchrot::cli
