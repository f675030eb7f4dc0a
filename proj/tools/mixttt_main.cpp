// mixttt: pretraining, corruption generation, test-time-training suites and
// theory verification from a flat key=value config.
//
// Exit codes: 0 ok, 1 verification checks failed, 2 config error,
// 3 numerical error, 4 I/O error.

#include <CLI11.hpp>
#include <bit>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "mixttt/analysis.hpp"
#include "mixttt/aux_tasks.hpp"
#include "mixttt/config.hpp"
#include "mixttt/data.hpp"
#include "mixttt/engine.hpp"
#include "mixttt/errors.hpp"
#include "mixttt/mixup.hpp"
#include "mixttt/network.hpp"
#include "mixttt/report.hpp"
#include "mixttt/synth.hpp"
#include "mixttt/threading.hpp"

using json = nlohmann::ordered_json;
using namespace mixttt;

namespace {

const std::set<std::string> kKnownKeys = {
    "seed", "out_dir",
    // network
    "net.input_channels", "net.input_size", "net.encoder", "net.main_classes", "net.aux_classes",
    "net.activation",
    // pretraining
    "pretrain.train_path", "pretrain.epochs", "pretrain.batch_size", "pretrain.aux_weight",
    "pretrain.lr_schedule", "pretrain.aux_rotations", "pretrain.momentum", "pretrain.seed",
    "pretrain.checkpoint_out", "pretrain.metrics_out",
    // episodes
    "episode.alpha", "episode.steps", "episode.batch", "episode.mode",
    // auxiliary task
    "task.kind", "task.param_subset", "task.ratio_low", "task.ratio_high",
    "task.ratio_granularity", "task.weight_contrastive", "task.weight_align", "task.temperature",
    // ttt suites
    "ttt.checkpoint", "ttt.train_path", "ttt.test_path", "ttt.corruptions", "ttt.test_files",
    "ttt.n_test", "ttt.corruption_seed", "ttt.table_out",
    // corruption generation
    "corrupt.in", "corrupt.out", "corrupt.kind", "corrupt.severity", "corrupt.seed",
    // verification
    "verify.checks", "verify.data_path", "verify.checkpoint", "verify.train_path",
    "verify.taylor_configs", "verify.first_order_trials", "verify.gradcheck_coords",
    "verify.grad_norm_samples", "verify.drift_seeds", "verify.drift_steps",
    "verify.drift_embeddings", "verify.drift_update_batch", "verify.corruption_kind",
    "verify.corruption_severity",
};

std::string out_path(const RunConfig& cfg, const std::string& name) {
  const std::string dir = cfg.get_or("out_dir", ".");
  std::filesystem::create_directories(dir);
  return dir + "/" + name;
}

// Provenance hash over the effective config minus pure-output locations, so
// identical runs into different directories stay byte-identical.
std::uint64_t config_hash(const RunConfig& cfg) {
  RunConfig view = cfg;
  for (const char* key : {"out_dir", "corrupt.out", "pretrain.checkpoint_out",
                          "pretrain.metrics_out", "ttt.table_out"})
    view.erase(key);
  return view.hash();
}

void append_run_log(const RunConfig& cfg, const std::string& command, const std::string& status) {
  // the one output that may carry wall-clock time
  std::ofstream log(out_path(cfg, "run.log"), std::ios::app);
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%F %T", std::gmtime(&now));
  log << stamp << " " << command << " config_hash=" << hex64(config_hash(cfg)) << " " << status << "\n";
}

NetworkSpec network_from_config(const RunConfig& cfg) {
  NetworkSpec spec;
  spec.input_channels = static_cast<std::size_t>(cfg.get_int_or("net.input_channels", 3));
  const std::size_t size = static_cast<std::size_t>(cfg.get_int_or("net.input_size", 32));
  spec.input_height = spec.input_width = size;
  spec.encoder = parse_encoder_layout(
      cfg.get_or("net.encoder", "conv:16:s2:n:a,conv:32:s2:n:a,conv:64:s2:n:a"));
  spec.main_classes = static_cast<std::size_t>(cfg.get_int_or("net.main_classes", 10));
  spec.aux_classes = static_cast<std::size_t>(cfg.get_int_or("net.aux_classes", 4));
  const std::string act = cfg.get_or("net.activation", "smooth");
  if (act == "smooth")
    spec.activation = Activation::smooth;
  else if (act == "relu")
    spec.activation = Activation::relu;
  else
    throw ConfigError("net.activation must be smooth or relu, got: " + act);
  spec.validate();
  return spec;
}

AuxTaskSpec task_from_config(const RunConfig& cfg) {
  AuxTaskSpec task;
  task.kind = aux_task_kind_from_string(cfg.get_or("task.kind", "rotation"));
  switch (task.kind) {
    case AuxTaskKind::rotation: task = AuxTaskSpec::rotation_default(); break;
    case AuxTaskKind::entropy_min: task = AuxTaskSpec::entropy_min_default(); break;
    case AuxTaskKind::contrastive_align: task = AuxTaskSpec::contrastive_align_default(); break;
  }
  if (cfg.has("task.param_subset")) {
    const std::string& subset = cfg.get("task.param_subset");
    if (subset == "encoder_full")
      task.param_subset = ParamSubset::encoder_full;
    else if (subset == "norm_affine_only")
      task.param_subset = ParamSubset::norm_affine_only;
    else
      throw ConfigError("task.param_subset must be encoder_full or norm_affine_only");
  }
  task.ratio_spec.low = cfg.get_double_or("task.ratio_low", task.ratio_spec.low);
  task.ratio_spec.high = cfg.get_double_or("task.ratio_high", task.ratio_spec.high);
  const std::string gran = cfg.get_or("task.ratio_granularity", "per_pair");
  if (gran == "per_pair")
    task.ratio_spec.granularity = RatioGranularity::per_pair;
  else if (gran == "per_step")
    task.ratio_spec.granularity = RatioGranularity::per_step;
  else
    throw ConfigError("task.ratio_granularity must be per_pair or per_step");
  task.weight_contrastive = cfg.get_double_or("task.weight_contrastive", 1.0);
  task.weight_align = cfg.get_double_or("task.weight_align", 1.0);
  task.temperature = cfg.get_double_or("task.temperature", 0.5);
  task.validate();
  return task;
}

EpisodeConfig episode_from_config(const RunConfig& cfg) {
  EpisodeConfig ec;
  ec.alpha = cfg.get_double_or("episode.alpha", 1e-3);
  ec.steps = static_cast<int>(cfg.get_int_or("episode.steps", 10));
  ec.mix_batch = static_cast<std::size_t>(cfg.get_int_or("episode.batch", 32));
  const std::string mode = cfg.get_or("episode.mode", "single_reset");
  if (mode == "single_reset")
    ec.mode = EpisodeMode::single_reset;
  else if (mode == "batch_online")
    ec.mode = EpisodeMode::batch_online;
  else
    throw ConfigError("episode.mode must be single_reset or batch_online");
  ec.task = task_from_config(cfg);
  ec.seed = cfg.get_u64_or("seed", 0);
  ec.validate();
  return ec;
}

Tensor hash_tensor(std::uint64_t hash) {
  Tensor t({1});
  t[0] = std::bit_cast<double>(hash);
  return t;
}

struct Checkpoint {
  SplitNetworkState state;
  bool has_stats = false;
  TrainFeatureStats stats;
};

Checkpoint load_checkpoint(const RunConfig& cfg, const std::string& path) {
  Checkpoint cp{build_network(network_from_config(cfg), 0)};
  const std::vector<NamedTensor> leftovers = load_network(path, cp.state);
  if (find_tensor(leftovers, "feat_stats.mean")) {
    cp.stats = feature_stats_from_tensors(leftovers);
    cp.has_stats = true;
  }
  return cp;
}

// ---- pretrain --------------------------------------------------------------------

int cmd_pretrain(RunConfig& cfg) {
  cfg.require_path_exists("pretrain.train_path");
  const Dataset train = load_dataset(cfg.get("pretrain.train_path"));

  const NetworkSpec spec = network_from_config(cfg);
  PretrainConfig pc;
  pc.epochs = static_cast<int>(cfg.get_int_or("pretrain.epochs", 8));
  pc.batch_size = static_cast<std::size_t>(cfg.get_int_or("pretrain.batch_size", 64));
  pc.aux_weight = cfg.get_double_or("pretrain.aux_weight", 1.0);
  pc.lr_schedule = cfg.get_or("pretrain.lr_schedule", "constant:0.05");
  pc.aux_rotations_per_image = static_cast<int>(cfg.get_int_or("pretrain.aux_rotations", 1));
  pc.momentum = cfg.get_double_or("pretrain.momentum", 0.9);
  pc.seed = cfg.get_u64_or("pretrain.seed", cfg.get_u64_or("seed", 0));

  SplitNetworkState state = build_network(spec, pc.seed);
  const PretrainResult result = pretrain(state, train, pc);

  const std::string ckpt = out_path(cfg, cfg.get_or("pretrain.checkpoint_out", "checkpoint.mttt"));
  std::vector<NamedTensor> extra = feature_stats_to_tensors(result.feature_stats);
  extra.push_back(NamedTensor{"meta.config_hash", hash_tensor(config_hash(cfg))});
  save_network(ckpt, state, extra);

  CsvFile csv(out_path(cfg, cfg.get_or("pretrain.metrics_out", "pretrain_metrics.csv")), config_hash(cfg));
  csv.header({"epoch", "lr", "main_loss", "aux_loss", "train_accuracy_percent"});
  for (const EpochMetrics& m : result.epochs)
    csv.row({format_num(m.epoch), format_num(m.lr), format_num(m.main_loss),
             format_num(m.aux_loss), format_num(m.train_accuracy)});
  csv.close();

  std::cout << "pretrained " << pc.epochs << " epochs on " << train.size()
            << " images, final train accuracy " << format_num(result.final_train_accuracy)
            << "%\ncheckpoint: " << ckpt << "\n";
  return 0;
}

// ---- corrupt ---------------------------------------------------------------------

int cmd_corrupt(RunConfig& cfg) {
  cfg.require_path_exists("corrupt.in");
  const Dataset input = load_dataset(cfg.get("corrupt.in"));
  CorruptionSpec spec;
  spec.kind = corruption_kind_from_string(cfg.get("corrupt.kind"));
  const long severity = cfg.get_int("corrupt.severity");
  if (severity < 0 || severity > 5)
    throw ConfigError("corrupt.severity out of range 0..5: " + std::to_string(severity));
  spec.severity = static_cast<int>(severity);
  spec.seed = cfg.get_u64_or("corrupt.seed", cfg.get_u64_or("seed", 0));

  Dataset out;
  out.images = corrupt(input.images, spec);
  out.labels = input.labels;  // labels untouched by corruption
  const std::string path = cfg.get("corrupt.out");
  if (const auto dir = std::filesystem::path(path).parent_path(); !dir.empty())
    std::filesystem::create_directories(dir);
  save_dataset(out, path);
  std::cout << "corrupted " << out.size() << " images (" << cfg.get("corrupt.kind") << " severity "
            << severity << ") -> " << path << "\n";
  return 0;
}

// ---- ttt -------------------------------------------------------------------------

int cmd_ttt(RunConfig& cfg) {
  cfg.require_path_exists("ttt.checkpoint");
  cfg.require_path_exists("ttt.train_path");
  Checkpoint cp = load_checkpoint(cfg, cfg.get("ttt.checkpoint"));
  const Dataset train = load_dataset(cfg.get("ttt.train_path"));

  const std::size_t n_test = static_cast<std::size_t>(cfg.get_int_or("ttt.n_test", 0));
  std::vector<SuiteEntry> entries;

  if (cfg.has("ttt.corruptions")) {
    cfg.require_path_exists("ttt.test_path");
    Dataset clean = load_dataset(cfg.get("ttt.test_path"));
    if (n_test > 0 && n_test < clean.size()) clean = clean.subset(0, n_test);
    const std::uint64_t cseed = cfg.get_u64_or("ttt.corruption_seed", cfg.get_u64_or("seed", 0));
    std::size_t idx = 0;
    for (const std::string& item : cfg.get_list("ttt.corruptions")) {
      const auto colon = item.find(':');
      if (colon == std::string::npos)
        throw ConfigError("ttt.corruptions entries must be kind:severity, got: " + item);
      SuiteEntry entry;
      entry.corruption = item.substr(0, colon);
      entry.severity = std::stoi(item.substr(colon + 1));
      CorruptionSpec cs;
      cs.kind = corruption_kind_from_string(entry.corruption);
      cs.severity = entry.severity;
      cs.seed = Rng::mix(cseed, idx++);
      entry.test.images = corrupt(clean.images, cs);
      entry.test.labels = clean.labels;
      entries.push_back(std::move(entry));
    }
  }
  if (cfg.has("ttt.test_files")) {
    // externally prepared corrupted sets: name:severity:path
    for (const std::string& item : cfg.get_list("ttt.test_files")) {
      const auto c1 = item.find(':');
      const auto c2 = item.find(':', c1 + 1);
      if (c1 == std::string::npos || c2 == std::string::npos)
        throw ConfigError("ttt.test_files entries must be name:severity:path, got: " + item);
      SuiteEntry entry;
      entry.corruption = item.substr(0, c1);
      entry.severity = std::stoi(item.substr(c1 + 1, c2 - c1 - 1));
      const std::string path = item.substr(c2 + 1);
      if (!std::filesystem::exists(path))
        throw ConfigError("ttt.test_files references a missing path: " + path);
      entry.test = load_dataset(path);
      if (n_test > 0 && n_test < entry.test.size()) entry.test = entry.test.subset(0, n_test);
      entries.push_back(std::move(entry));
    }
  }
  if (entries.empty())
    throw ConfigError("ttt needs ttt.corruptions and/or ttt.test_files");

  const EpisodeConfig episode = episode_from_config(cfg);
  if (episode.task.kind == AuxTaskKind::contrastive_align && !cp.has_stats)
    throw ConfigError("contrastive task needs a checkpoint with feature stats");

  const std::vector<SuiteRow> rows =
      run_suite(cp.state, entries, train, episode, cp.has_stats ? &cp.stats : nullptr,
                cfg.get_u64_or("seed", 0));

  CsvFile csv(out_path(cfg, cfg.get_or("ttt.table_out", "ttt_errors.csv")), config_hash(cfg));
  csv.header({"corruption", "severity", "method", "error_rate_percent", "n_samples", "seed"});
  for (const SuiteRow& r : rows)
    csv.row({r.corruption, format_num(r.severity), r.method, format_num(r.error_percent),
             format_num(r.n_samples), format_num(r.seed)});
  csv.close();

  for (const SuiteRow& r : rows)
    if (r.corruption == "average")
      std::cout << r.method << " average error " << format_num(r.error_percent) << "%\n";
  return 0;
}

// ---- verify ----------------------------------------------------------------------

struct CheckOutcome {
  bool enabled = false;
  bool pass = true;
  json details;
};

Tensor pick_image(const Dataset& ds, std::size_t i) { return ds.image(i % ds.size()); }

int cmd_verify(RunConfig& cfg) {
  const std::set<std::string> valid_checks = {"quadratic", "taylor",    "first_order",
                                              "gradcheck", "chain_rule", "grad_norm",
                                              "drift"};
  std::set<std::string> checks;
  for (const std::string& c :
       RunConfig::parse_string("k=" + cfg.get_or("verify.checks",
                                                 "quadratic,taylor,first_order,gradcheck,"
                                                 "chain_rule,grad_norm,drift"))
           .get_list("k")) {
    if (c == "none") continue;
    if (!valid_checks.count(c)) throw ConfigError("unknown verify check: " + c);
    checks.insert(c);
  }
  const std::uint64_t seed = cfg.get_u64_or("seed", 0);
  const std::vector<double> mu_list = {0.05, 0.025, 0.0125, 0.00625};

  Dataset data;
  const bool needs_data =
      checks.count("taylor") || checks.count("first_order") || checks.count("grad_norm") ||
      checks.count("drift");
  if (needs_data) {
    cfg.require_path_exists("verify.data_path");
    data = load_dataset(cfg.get("verify.data_path"));
  }

  json summary;
  summary["config_hash"] = hex64(config_hash(cfg));
  std::map<std::string, CheckOutcome> outcome;

  // small smooth specs used by the math checks
  auto small_spec = [&cfg](int variant) {
    NetworkSpec spec = network_from_config(cfg);
    spec.encoder = variant % 2 == 0
                       ? parse_encoder_layout("conv:8:s2:n:a,conv:12:s2:a,linear:16:a")
                       : parse_encoder_layout("conv:6:s2:a,conv:10:s2:n:a,linear:12:n:a");
    spec.activation = Activation::smooth;
    return spec;
  };

  if (checks.count("quadratic")) {
    CheckOutcome& c = outcome["quadratic"];
    c.enabled = true;
    Rng rng(Rng::mix(seed, 0x9a4d));
    Tensor x_t({1, 2, 3, 3}), x_i({1, 2, 3, 3});
    for (std::size_t i = 0; i < x_t.numel(); ++i) {
      x_t[i] = rng.uniform(-1.0, 1.0);
      x_i[i] = rng.uniform(-1.0, 1.0);
    }
    const QuadraticField field;
    const TaylorReport report = taylor_verify(field, x_t, x_i, mu_list);
    const double dist2 = dot(x_i - x_t, x_i - x_t);
    double max_rel = 0.0;
    for (std::size_t k = 0; k < report.mu.size(); ++k) {
      const double expected = report.mu[k] * report.mu[k] * dist2;
      max_rel = std::max(max_rel, std::abs(report.remainder[k] - expected) / expected);
    }
    c.pass = max_rel < 1e-9 && std::abs(report.fitted_exponent - 2.0) < 1e-6;
    c.details["max_remainder_rel_err"] = max_rel;
    c.details["fitted_exponent"] = report.fitted_exponent;
  }

  if (checks.count("taylor")) {
    CheckOutcome& c = outcome["taylor"];
    c.enabled = true;
    const int configs = static_cast<int>(cfg.get_int_or("verify.taylor_configs", 5));
    CsvFile report_csv(out_path(cfg, "taylor_report.csv"), config_hash(cfg));
    report_csv.header({"config", "mu", "L_mt", "first_order", "remainder", "used_in_fit"});
    CsvFile summary_csv(out_path(cfg, "taylor_summary.csv"), config_hash(cfg));
    summary_csv.header({"config", "seed", "L_t", "exponent", "min_ratio", "max_ratio", "pass"});
    json exps = json::array();
    for (int v = 0; v < configs; ++v) {
      const std::uint64_t net_seed = Rng::mix(seed, 0x7a11 + v);
      SplitNetworkState net = build_network(small_spec(v), net_seed);
      Rng pick(Rng::mix(seed, 0x9100 + v));
      const Tensor x_t = pick_image(data, pick.uniform_index(data.size()));
      const Tensor x_i = pick_image(data, pick.uniform_index(data.size()));
      AuxLossField field(net, static_cast<std::uint32_t>(v) % static_cast<std::uint32_t>(net.spec.aux_classes));
      const TaylorReport r = taylor_verify(field, x_t, x_i, mu_list);
      double rmin = 1e300, rmax = 0.0;
      for (double ratio : r.ratios) {
        rmin = std::min(rmin, ratio);
        rmax = std::max(rmax, ratio);
      }
      const bool pass = r.fitted_exponent >= 1.8 && r.fitted_exponent <= 2.2 && rmin >= 3.5 && rmax <= 4.5;
      c.pass = c.pass && pass;
      for (std::size_t k = 0; k < r.mu.size(); ++k)
        report_csv.row({format_num(v), format_num(r.mu[k]), format_num(r.L_mt[k]),
                        format_num(r.first_order[k]), format_num(r.remainder[k]),
                        r.used_in_fit[k] ? "1" : "0"});
      summary_csv.row({format_num(v), format_num(std::size_t{net_seed}), format_num(r.L_t),
                       format_num(r.fitted_exponent), format_num(rmin), format_num(rmax),
                       pass ? "1" : "0"});
      exps.push_back(r.fitted_exponent);
    }
    report_csv.close();
    summary_csv.close();
    c.details["exponents"] = exps;
  }

  if (checks.count("first_order")) {
    CheckOutcome& c = outcome["first_order"];
    c.enabled = true;
    const int trials = static_cast<int>(cfg.get_int_or("verify.first_order_trials", 100));
    CsvFile csv(out_path(cfg, "first_order.csv"), config_hash(cfg));
    csv.header({"trial", "first_order", "secant_times_mu", "rel_err"});
    double max_rel = 0.0;
    const double h = 1e-5, mu = 0.05;
    for (int t = 0; t < trials; ++t) {
      const std::uint64_t net_seed = Rng::mix(seed, 0xf0 + t / 10);
      SplitNetworkState net = build_network(small_spec(t / 10), net_seed);
      Rng pick(Rng::mix(seed, 0x5800 + t));
      const Tensor x_t = pick_image(data, pick.uniform_index(data.size()));
      const Tensor x_i = pick_image(data, pick.uniform_index(data.size()));
      AuxLossField field(net, static_cast<std::uint32_t>(t % 4));
      const double fo = first_order_term(field, x_t, x_i, mu);
      const Tensor dir = x_i - x_t;
      Tensor xh = x_t;
      for (std::size_t i = 0; i < xh.numel(); ++i) xh[i] += h * dir[i];
      const double secant = (field.value(xh) - field.value(x_t)) / h * mu;
      const double rel = std::abs(fo - secant) / std::max({std::abs(fo), std::abs(secant), 1e-12});
      max_rel = std::max(max_rel, rel);
      csv.row({format_num(t), format_num(fo), format_num(secant), format_num(rel)});
    }
    csv.close();
    c.pass = max_rel <= 1e-3;
    c.details["max_rel_err"] = max_rel;
    c.details["trials"] = trials;
  }

  if (checks.count("gradcheck")) {
    CheckOutcome& c = outcome["gradcheck"];
    c.enabled = true;
    const int target = static_cast<int>(cfg.get_int_or("verify.gradcheck_coords", 1000));
    SplitNetworkState net = build_network(small_spec(0), Rng::mix(seed, 0x6c));
    Rng rng(Rng::mix(seed, 0x6d));
    Tensor batch({3, net.spec.input_channels, net.spec.input_height, net.spec.input_width});
    for (std::size_t i = 0; i < batch.numel(); ++i) batch[i] = rng.uniform();
    AuxCrossEntropyLoss loss({0, 1, 2});
    double max_rel = 0.0;
    int checked = 0;
    for (Mode mode : {Mode::train, Mode::eval}) {
      ForwardCache cache;
      ForwardResult out = forward_all(net, batch, mode, false, cache);
      OutputGrads og;
      loss.evaluate(out, &og);
      const Gradients g = backward(net, cache, og, true);
      const std::size_t total = net.total_param_size();
      std::vector<double> params = flat_params(net);
      const double h = 1e-5;
      for (int t = 0; t < target / 3; ++t) {
        const std::size_t idx = rng.uniform_index(total);
        const double orig = params[idx];
        params[idx] = orig + h;
        set_flat_params(net, params);
        ForwardCache c2;
        const double up = loss.evaluate(forward_all(net, batch, mode, false, c2), nullptr);
        params[idx] = orig - h;
        set_flat_params(net, params);
        const double down = loss.evaluate(forward_all(net, batch, mode, false, c2), nullptr);
        params[idx] = orig;
        set_flat_params(net, params);
        const double fd = (up - down) / (2.0 * h);
        max_rel = std::max(max_rel, std::abs(g.flat[idx] - fd) /
                                        std::max({std::abs(g.flat[idx]), std::abs(fd), 1e-6}));
        ++checked;
      }
      for (int t = 0; t < target / 6; ++t) {
        const std::size_t idx = rng.uniform_index(batch.numel());
        const double orig = batch[idx];
        ForwardCache c2;
        batch[idx] = orig + h;
        const double up = loss.evaluate(forward_all(net, batch, mode, false, c2), nullptr);
        batch[idx] = orig - h;
        const double down = loss.evaluate(forward_all(net, batch, mode, false, c2), nullptr);
        batch[idx] = orig;
        const double fd = (up - down) / (2.0 * h);
        max_rel = std::max(max_rel, std::abs(g.input_grad[idx] - fd) /
                                        std::max({std::abs(g.input_grad[idx]), std::abs(fd), 1e-6}));
        ++checked;
      }
    }
    c.pass = max_rel <= 1e-4;
    c.details["max_rel_err"] = max_rel;
    c.details["coords_checked"] = checked;
  }

  if (checks.count("chain_rule")) {
    CheckOutcome& c = outcome["chain_rule"];
    c.enabled = true;
    NetworkSpec spec = small_spec(0);
    spec.input_channels = 2;
    spec.input_height = spec.input_width = 6;
    spec.encoder = parse_encoder_layout("conv:4:s2:n:a,linear:8:a");
    SplitNetworkState net = build_network(spec, Rng::mix(seed, 0xce));
    Rng rng(Rng::mix(seed, 0xcf));
    Tensor x({1, 2, 6, 6});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform();
    const double residual = chain_rule_residual(net, x, 1);
    c.pass = residual <= 1e-3;
    c.details["residual"] = residual;
  }

  Checkpoint cp{build_network(network_from_config(cfg), 0)};
  Dataset train;
  const bool needs_model = checks.count("grad_norm") || checks.count("drift");
  if (needs_model) {
    cfg.require_path_exists("verify.checkpoint");
    cp = load_checkpoint(cfg, cfg.get("verify.checkpoint"));
    cfg.require_path_exists("verify.train_path");
    train = load_dataset(cfg.get("verify.train_path"));
  }
  const CorruptionKind ckind =
      corruption_kind_from_string(cfg.get_or("verify.corruption_kind", "gaussian_noise"));
  const int cseverity = static_cast<int>(cfg.get_int_or("verify.corruption_severity", 5));

  if (checks.count("grad_norm")) {
    CheckOutcome& c = outcome["grad_norm"];
    c.enabled = true;
    const std::size_t n = static_cast<std::size_t>(cfg.get_int_or("verify.grad_norm_samples", 20));
    Dataset sub = data.subset(0, std::min(n, data.size()));
    CorruptionSpec cs{ckind, cseverity, Rng::mix(seed, 0x44)};
    const Tensor tests = corrupt(sub.images, cs);

    EpisodeConfig plain = episode_from_config(cfg);
    plain.mix_enabled = false;
    plain.task = AuxTaskSpec::rotation_default();
    EpisodeConfig mixed = plain;
    mixed.mix_enabled = true;
    const TrainPartnerPool pool(&train.images);
    const GradNormSummary s =
        grad_norm_compare(cp.state, tests, plain, mixed, pool, cp.has_stats ? &cp.stats : nullptr);

    CsvFile csv(out_path(cfg, "grad_norm.csv"), config_hash(cfg));
    csv.header({"sample", "step", "norm_plain", "norm_mixttt"});
    for (std::size_t i = 0; i < s.plain_traces.size(); ++i)
      for (std::size_t k = 0; k < s.plain_traces[i].size(); ++k)
        csv.row({format_num(i), format_num(k + 1), format_num(s.plain_traces[i][k]),
                 format_num(s.mix_traces[i][k])});
    csv.close();
    c.pass = s.mix_not_larger;
    c.details["mean_plain"] = s.mean_plain;
    c.details["mean_mixttt"] = s.mean_mix;
    c.details["mean_diff"] = s.mean_diff;
    c.details["t_stat"] = s.t_stat;
    c.details["n_samples"] = s.n_samples;
  }

  if (checks.count("drift")) {
    CheckOutcome& c = outcome["drift"];
    c.enabled = true;
    const int n_seeds = static_cast<int>(cfg.get_int_or("verify.drift_seeds", 4));
    const int steps = static_cast<int>(cfg.get_int_or("verify.drift_steps", 30));
    const std::size_t n_embed =
        static_cast<std::size_t>(cfg.get_int_or("verify.drift_embeddings", 1000));
    const std::size_t update_batch =
        static_cast<std::size_t>(cfg.get_int_or("verify.drift_update_batch", 250));

    Dataset sub = data.subset(0, std::min(n_embed, data.size()));
    const TrainPartnerPool pool(&train.images);

    CsvFile csv(out_path(cfg, "drift.csv"), config_hash(cfg));
    csv.header({"seed", "method", "step", "db_index"});
    int wins = 0;
    struct RunOut {
      DriftReport report;
      std::vector<std::uint32_t> labels;
    };
    std::vector<std::vector<DriftReport>> all(static_cast<std::size_t>(n_seeds));
    json deltas = json::array();
    for (int sd = 0; sd < n_seeds; ++sd) {
      CorruptionSpec cs{ckind, cseverity, Rng::mix(seed, 0x2000 + sd)};
      Dataset corrupted;
      corrupted.images = corrupt(sub.images, cs);
      corrupted.labels = sub.labels;

      std::vector<DriftReport> method_reports;
      for (int m = 0; m < 2; ++m) {
        SplitNetworkState local = cp.state;
        EpisodeConfig ec = episode_from_config(cfg);
        ec.task = AuxTaskSpec::rotation_default();
        ec.mode = EpisodeMode::batch_online;
        ec.mix_enabled = m == 1;
        ec.steps = steps;
        ec.mix_batch = update_batch;
        ec.alpha = 1e-3;
        ec.seed = Rng::mix(seed, 0x3000 + sd);
        ec.feature_checkpoints = {0, steps / 3, 2 * steps / 3, steps};
        const EpisodeResult er =
            ttt_episode(local, corrupted.images, ec, ec.mix_enabled ? &pool : nullptr,
                        cp.has_stats ? &cp.stats : nullptr);
        DriftReport dr = drift_analysis(er.feature_snapshots, er.checkpoint_steps, corrupted.labels);
        for (std::size_t k = 0; k < dr.steps.size(); ++k)
          csv.row({format_num(sd), m == 0 ? "ttt" : "mixttt", format_num(dr.steps[k]),
                   format_num(dr.db_index[k])});
        method_reports.push_back(std::move(dr));
      }
      const DriftReport& plain = method_reports[0];
      const DriftReport& mixed = method_reports[1];
      const double d_plain = plain.db_index.back() - plain.db_index.front();
      const double d_mix = mixed.db_index.back() - mixed.db_index.front();
      const bool finite = std::isfinite(d_plain) && std::isfinite(d_mix);
      if (finite && d_plain > d_mix) ++wins;
      if (!finite) c.pass = false;
      deltas.push_back({{"seed", sd}, {"delta_ttt", d_plain}, {"delta_mixttt", d_mix}});

      if (sd == 0) {
        for (int m = 0; m < 2; ++m) {
          CsvFile proj(out_path(cfg, m == 0 ? "projection_ttt.csv" : "projection_mixttt.csv"),
                       config_hash(cfg));
          proj.header({"id", "label", "pc1", "pc2", "step"});
          const DriftReport& dr = method_reports[static_cast<std::size_t>(m)];
          for (std::size_t k = 0; k < dr.steps.size(); ++k)
            for (std::size_t i = 0; i < corrupted.labels.size(); ++i)
              proj.row({format_num(i), format_num(std::size_t{corrupted.labels[i]}),
                        format_num(dr.projections[k].at(i, 0)),
                        format_num(dr.projections[k].at(i, 1)), format_num(dr.steps[k])});
          proj.close();
        }
      }
    }
    csv.close();
    c.pass = c.pass && (wins * 4 >= 3 * n_seeds);
    c.details["wins"] = wins;
    c.details["n_seeds"] = n_seeds;
    c.details["deltas"] = deltas;
  }

  bool all_pass = true;
  json checks_json;
  for (auto& [name, c] : outcome) {
    c.details["pass"] = c.pass;
    checks_json[name] = c.details;
    all_pass = all_pass && c.pass;
    std::cout << "check " << name << ": " << (c.pass ? "pass" : "FAIL") << "\n";
  }
  summary["checks"] = checks_json;
  summary["all_pass"] = all_pass;
  std::ofstream js(out_path(cfg, "verify_summary.json"));
  js << summary.dump(2) << "\n";

  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixed test-time training laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  bool seed_given = false, out_given = false;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", config_path, "run configuration file");
    if (config_required) c->required();
    sub->add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
      seed_given = true;
    });
    sub->add_option("--out", out_dir, "override the output directory")->each([&](const std::string&) {
      out_given = true;
    });
  };

  CLI::App* pretrain_cmd = app.add_subcommand("pretrain", "multi-task pretraining");
  add_common(pretrain_cmd, true);
  CLI::App* corrupt_cmd = app.add_subcommand("corrupt", "generate a corrupted dataset");
  add_common(corrupt_cmd, false);
  std::string c_in, c_kind;
  long c_severity = -1;
  corrupt_cmd->add_option("--in", c_in, "input dataset");
  corrupt_cmd->add_option("--kind", c_kind, "corruption kind");
  corrupt_cmd->add_option("--severity", c_severity, "severity 0..5");
  CLI::App* ttt_cmd = app.add_subcommand("ttt", "run the corruption error suite");
  add_common(ttt_cmd, true);
  CLI::App* verify_cmd = app.add_subcommand("verify", "run the theory verification checks");
  add_common(verify_cmd, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  RunConfig cfg;
  try {
    if (!config_path.empty())
      cfg = RunConfig::parse_file(config_path);
    cfg.require_known_keys(kKnownKeys);
    if (seed_given) cfg.set("seed", std::to_string(seed));
    if (out_given && command != "corrupt") cfg.set("out_dir", out_dir);
    if (command == "corrupt") {
      // data-module flag surface; flags override config keys
      if (!c_in.empty()) cfg.set("corrupt.in", c_in);
      if (out_given) cfg.set("corrupt.out", out_dir);
      if (!c_kind.empty()) cfg.set("corrupt.kind", c_kind);
      if (c_severity >= 0) cfg.set("corrupt.severity", std::to_string(c_severity));
    }

    int rc = 0;
    if (command == "pretrain")
      rc = cmd_pretrain(cfg);
    else if (command == "corrupt")
      rc = cmd_corrupt(cfg);
    else if (command == "ttt")
      rc = cmd_ttt(cfg);
    else if (command == "verify")
      rc = cmd_verify(cfg);
    append_run_log(cfg, command, rc == 0 ? "status=ok" : "status=failed_checks");
    return rc;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    try {
      append_run_log(cfg, command, "status=numerical_error");
    } catch (...) {
    }
    return 3;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
