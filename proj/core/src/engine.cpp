#include "mixttt/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <thread>

#include "mixttt/errors.hpp"
#include "mixttt/threading.hpp"

namespace mixttt {

// ---- threading -----------------------------------------------------------------

std::size_t max_threads() {
  if (const char* env = std::getenv("MIXTTT_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc ? hc : 1;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(max_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto body = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(body);
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---- episodes -------------------------------------------------------------------

namespace {

constexpr std::uint64_t kTagMix = 0x6d6978;   // partner/ratio draws
constexpr std::uint64_t kTagAug = 0x617567;   // augmentation draws

constexpr std::size_t kForwardChunk = 256;

Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& rows) {
  const std::size_t px = src.numel() / src.dim(0);
  Tensor out({rows.size(), src.dim(1), src.dim(2), src.dim(3)});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* p = src.data() + rows[i] * px;
    std::copy(p, p + px, out.data() + i * px);
  }
  return out;
}

int argmax_lowest(const Tensor& logits, std::size_t row) {
  const std::size_t K = logits.dim(1);
  int best = 0;
  double best_v = logits.at(row, 0);
  for (std::size_t k = 1; k < K; ++k) {
    if (logits.at(row, k) > best_v) {
      best_v = logits.at(row, k);
      best = static_cast<int>(k);
    }
  }
  return best;
}

}  // namespace

void EpisodeConfig::validate() const {
  if (steps < 1) throw ConfigError("episode steps must be >= 1");
  if (alpha < 0.0) throw ConfigError("episode learning rate must be nonnegative");
  if (mix_batch == 0) throw ConfigError("episode batch size must be >= 1");
  task.validate();
}

Tensor eval_features(SplitNetworkState& state, const Tensor& inputs) {
  const std::size_t N = inputs.dim(0);
  const std::size_t D = state.spec.feature_dim();
  Tensor out({N, D});
  const std::size_t px = inputs.numel() / N;
  for (std::size_t n0 = 0; n0 < N; n0 += kForwardChunk) {
    const std::size_t n1 = std::min(N, n0 + kForwardChunk);
    Tensor chunk({n1 - n0, inputs.dim(1), inputs.dim(2), inputs.dim(3)});
    std::copy(inputs.data() + n0 * px, inputs.data() + n1 * px, chunk.data());
    Tensor f = forward_features(state, chunk, Mode::eval);
    std::copy(f.data(), f.data() + f.numel(), out.data() + n0 * D);
  }
  return out;
}

std::vector<int> infer_batch(SplitNetworkState& state, const Tensor& inputs) {
  const Tensor features = eval_features(state, inputs);
  const Tensor logits = head_logits(features, state.main_w, state.main_b);
  std::vector<int> preds(inputs.dim(0));
  for (std::size_t i = 0; i < preds.size(); ++i) preds[i] = argmax_lowest(logits, i);
  return preds;
}

int infer(SplitNetworkState& state, const Tensor& test_input) {
  if (test_input.rank() != 4 || test_input.dim(0) != 1)
    throw InputError("infer expects a single image [1,C,H,W]");
  return infer_batch(state, test_input)[0];
}

EpisodeResult ttt_episode(SplitNetworkState& state, const Tensor& test_inputs,
                          const EpisodeConfig& config, const TrainPartnerPool* pool,
                          const TrainFeatureStats* stats) {
  config.validate();
  if (test_inputs.rank() != 4 || test_inputs.dim(0) == 0)
    throw InputError("ttt_episode: test inputs must be a nonempty [T,C,H,W] tensor");
  if (config.mix_enabled && (!pool || pool->empty()))
    throw InputError("ttt_episode: mixing enabled but no training partner pool");
  if (config.task.kind == AuxTaskKind::contrastive_align && !stats)
    throw InputError("ttt_episode: contrastive task needs training feature stats");

  const bool reset = config.mode == EpisodeMode::single_reset;
  ParameterImage snap;
  if (reset) snap = snapshot(state);

  Rng mix_rng(Rng::mix(config.seed, kTagMix));
  Rng aug_rng(Rng::mix(config.seed, kTagAug));

  const ParamSelector selector = config.task.param_subset == ParamSubset::encoder_full
                                     ? selector_encoder_full(state)
                                     : collect_affine_params(state);

  EpisodeResult result;
  auto maybe_checkpoint = [&](int after_steps) {
    if (std::find(config.feature_checkpoints.begin(), config.feature_checkpoints.end(),
                  after_steps) == config.feature_checkpoints.end())
      return -1;
    result.feature_snapshots.push_back(eval_features(state, test_inputs));
    result.checkpoint_steps.push_back(after_steps);
    return static_cast<int>(result.feature_snapshots.size()) - 1;
  };
  maybe_checkpoint(0);

  const std::size_t t_count = test_inputs.dim(0);
  for (int step = 1; step <= config.steps; ++step) {
    // batch_online runs with update batches smaller than the test set walk
    // through it across steps
    const std::size_t offset =
        config.mode == EpisodeMode::batch_online
            ? (static_cast<std::size_t>(step - 1) * config.mix_batch) % t_count
            : 0;
    MixedBatch mb = config.mix_enabled
                        ? build_mixed_batch(test_inputs, *pool, config.task.ratio_spec,
                                            config.mix_batch, mix_rng, offset)
                        : build_plain_batch(test_inputs, config.mix_batch, offset);

    double loss_value = 0.0;
    Gradients grads;
    ForwardCache cache;
    OutputGrads og;
    switch (config.task.kind) {
      case AuxTaskKind::rotation: {
        // frozen normalization statistics: single-sample batches carry no
        // usable batch statistics for this task
        RotatedBatch rb = rotation_expand(mb.inputs);
        ForwardResult out = forward_all(state, rb.images, Mode::eval, false, cache);
        AuxCrossEntropyLoss loss(rb.labels);
        loss_value = loss.evaluate(out, &og);
        break;
      }
      case AuxTaskKind::entropy_min: {
        // normalization statistics recomputed from the episode batch
        ForwardResult out = forward_all(state, mb.inputs, Mode::train, false, cache);
        MainEntropyLoss loss;
        loss_value = loss.evaluate(out, &og);
        break;
      }
      case AuxTaskKind::contrastive_align: {
        Tensor view_src = gather_rows(test_inputs, mb.test_ids);
        Tensor views = augment_crop_flip(view_src, aug_rng);
        Tensor batch = concat_rows(views, mb.inputs);
        ForwardResult out = forward_all(state, batch, Mode::train, false, cache);
        ContrastiveAlignLoss loss(stats, config.task.weight_contrastive,
                                  config.task.weight_align, config.task.temperature);
        loss_value = loss.evaluate(out, &og);
        break;
      }
    }
    if (!std::isfinite(loss_value))
      throw EpisodeError("non-finite auxiliary loss", step, result.trace);
    grads = backward(state, cache, og, false);
    const double gnorm = encoder_grad_norm(state, grads.flat);
    if (!std::isfinite(gnorm))
      throw EpisodeError("non-finite gradient norm", step, result.trace);

    add_scaled_subset(state, selector, grads.flat, -config.alpha);
    StepRecord rec;
    rec.aux_loss = loss_value;
    rec.grad_norm_theta = gnorm;
    rec.feature_ref = maybe_checkpoint(step);
    result.trace.push_back(rec);
  }

  result.predictions = infer_batch(state, test_inputs);
  if (reset) restore(state, snap);
  return result;
}

// ---- pretraining ------------------------------------------------------------------

void PretrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("pretrain epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("pretrain batch size must be >= 1");
  if (aux_weight < 0.0) throw ConfigError("pretrain aux weight must be >= 0");
  if (aux_rotations_per_image < 0 || aux_rotations_per_image > 4)
    throw ConfigError("aux rotations per image must be in 0..4");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
  parse_schedule_lr(lr_schedule, 0, std::max(epochs, 1));
}

double parse_schedule_lr(const std::string& schedule, int epoch, int total_epochs) {
  const auto colon = schedule.find(':');
  if (colon == std::string::npos) throw ConfigError("bad lr schedule: " + schedule);
  const std::string kind = schedule.substr(0, colon);
  const std::string rest = schedule.substr(colon + 1);
  try {
    if (kind == "constant") return std::stod(rest);
    if (kind == "cosine") {
      const double base = std::stod(rest);
      const double t = total_epochs > 1 ? static_cast<double>(epoch) / (total_epochs - 1) : 0.0;
      return 0.5 * base * (1.0 + std::cos(3.14159265358979323846 * t));
    }
    if (kind == "step") {
      // step:<lr>:<every>:<factor>
      const auto c2 = rest.find(':');
      const auto c3 = rest.find(':', c2 + 1);
      if (c2 == std::string::npos || c3 == std::string::npos)
        throw ConfigError("bad step schedule: " + schedule);
      const double base = std::stod(rest.substr(0, c2));
      const int every = std::stoi(rest.substr(c2 + 1, c3 - c2 - 1));
      const double factor = std::stod(rest.substr(c3 + 1));
      if (every < 1) throw ConfigError("step schedule period must be >= 1");
      return base * std::pow(factor, epoch / every);
    }
  } catch (const std::invalid_argument&) {
    throw ConfigError("bad lr schedule value: " + schedule);
  }
  throw ConfigError("unknown lr schedule kind: " + schedule);
}

TrainFeatureStats compute_feature_stats(SplitNetworkState& state, const Dataset& data) {
  const Tensor features = eval_features(state, data.images);
  const std::size_t N = features.dim(0), D = features.dim(1);
  TrainFeatureStats stats;
  stats.mean = Tensor({D});
  stats.var = Tensor({D});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d) stats.mean[d] += features.at(n, d);
  for (std::size_t d = 0; d < D; ++d) stats.mean[d] /= static_cast<double>(N);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d) {
      const double r = features.at(n, d) - stats.mean[d];
      stats.var[d] += r * r;
    }
  for (std::size_t d = 0; d < D; ++d) stats.var[d] /= static_cast<double>(N);
  return stats;
}

PretrainResult pretrain(SplitNetworkState& state, const Dataset& train, const PretrainConfig& config) {
  config.validate();
  train.validate(state.spec.main_classes);
  if (train.size() == 0) throw InputError("pretrain: empty training set");

  const ParamSelector all = selector_all(state);
  std::vector<double> velocity(state.total_param_size(), 0.0);
  Rng rng(Rng::mix(config.seed, 0x70726574));

  const std::size_t px = train.images.numel() / train.size();
  PretrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = parse_schedule_lr(config.lr_schedule, epoch, config.epochs);
    // epoch shuffle
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_index(i)]);

    double main_sum = 0.0, aux_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < train.size(); b0 += config.batch_size) {
      const std::size_t b1 = std::min(train.size(), b0 + config.batch_size);
      const std::size_t bs = b1 - b0;
      Tensor batch({bs, train.images.dim(1), train.images.dim(2), train.images.dim(3)});
      std::vector<std::uint32_t> labels(bs);
      for (std::size_t i = 0; i < bs; ++i) {
        const std::size_t src = order[b0 + i];
        std::copy(train.images.data() + src * px, train.images.data() + (src + 1) * px,
                  batch.data() + i * px);
        labels[i] = train.labels[src];
      }

      // append rotated copies for the auxiliary head
      Tensor full = batch;
      std::vector<std::uint32_t> aux_labels;
      if (config.aux_weight > 0.0 && config.aux_rotations_per_image > 0) {
        for (int r = 0; r < config.aux_rotations_per_image; ++r) {
          Tensor rotated = Tensor::zeros_like(batch);
          std::vector<std::uint32_t> ks(bs);
          for (std::size_t i = 0; i < bs; ++i) ks[i] = static_cast<std::uint32_t>(rng.uniform_index(4));
          for (std::size_t i = 0; i < bs; ++i) {
            Tensor one({1, batch.dim(1), batch.dim(2), batch.dim(3)});
            std::copy(batch.data() + i * px, batch.data() + (i + 1) * px, one.data());
            Tensor rot = rotate_k90(one, static_cast<int>(ks[i]));
            std::copy(rot.data(), rot.data() + px, rotated.data() + i * px);
          }
          full = concat_rows(full, rotated);
          aux_labels.insert(aux_labels.end(), ks.begin(), ks.end());
        }
      }

      JointPretrainLoss loss(labels, bs, aux_labels, config.aux_weight);
      ForwardCache cache;
      ForwardResult out = forward_all(state, full, Mode::train, true, cache);
      OutputGrads og;
      const double value = loss.evaluate(out, &og);
      if (!std::isfinite(value))
        throw NumericalError("pretraining diverged (non-finite loss) at epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(batches));
      Gradients g = backward(state, cache, og, false);

      for (std::size_t i = 0; i < velocity.size(); ++i)
        velocity[i] = config.momentum * velocity[i] + g.flat[i];
      add_scaled_subset(state, all, velocity, -lr);

      // decompose for reporting
      Tensor main_slice({bs, out.main_logits.dim(1)});
      std::copy(out.main_logits.data(), out.main_logits.data() + main_slice.numel(), main_slice.data());
      main_sum += cross_entropy(main_slice, labels);
      if (!aux_labels.empty()) {
        const std::size_t aux_rows = full.dim(0) - bs;
        Tensor aux_slice({aux_rows, out.aux_logits.dim(1)});
        std::copy(out.aux_logits.data() + bs * out.aux_logits.dim(1),
                  out.aux_logits.data() + full.dim(0) * out.aux_logits.dim(1), aux_slice.data());
        aux_sum += cross_entropy(aux_slice, aux_labels);
      }
      ++batches;
    }

    // clean-set accuracy at epoch end
    const std::vector<int> preds = infer_batch(state, train.images);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
      if (preds[i] == static_cast<int>(train.labels[i])) ++correct;

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.main_loss = main_sum / static_cast<double>(batches);
    m.aux_loss = aux_sum / static_cast<double>(batches);
    m.train_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(train.size());
    result.epochs.push_back(m);
  }

  result.final_train_accuracy = result.epochs.back().train_accuracy;
  result.feature_stats = compute_feature_stats(state, train);
  return result;
}

// ---- suites --------------------------------------------------------------------------

std::vector<SuiteRow> run_suite(const SplitNetworkState& state, const std::vector<SuiteEntry>& entries,
                                const Dataset& train, const EpisodeConfig& episode_template,
                                const TrainFeatureStats* stats, std::uint64_t seed) {
  if (entries.empty()) throw InputError("run_suite: no corruption entries");
  const TrainPartnerPool pool(&train.images);

  std::vector<SuiteRow> rows;
  std::vector<double> method_sums(3, 0.0);
  const char* method_names[3] = {"baseline", "ttt", "mixttt"};

  for (std::size_t e = 0; e < entries.size(); ++e) {
    const SuiteEntry& entry = entries[e];
    const std::size_t n = entry.test.size();
    if (n == 0) throw InputError("run_suite: empty test set for " + entry.corruption);
    if (entry.test.images.dim(0) != n) throw InputError("run_suite: label/sample count mismatch");

    // baseline: no adaptation
    SplitNetworkState base_state = state;
    const std::vector<int> base_preds = infer_batch(base_state, entry.test.images);
    std::size_t base_err = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (base_preds[i] != static_cast<int>(entry.test.labels[i])) ++base_err;

    // plain TTT and MixTTT share per-sample episode seeds (paired runs)
    std::vector<std::size_t> errors(2, 0);
    for (int m = 0; m < 2; ++m) {
      const bool mixed = m == 1;
      std::vector<int> preds(n, -1);
      parallel_for(n, [&](std::size_t i) {
        SplitNetworkState local = state;
        EpisodeConfig ec = episode_template;
        ec.mix_enabled = mixed;
        ec.seed = Rng::mix(Rng::mix(seed, 0xe0 + e), i);
        const Tensor x = entry.test.image(i);
        EpisodeResult er = ttt_episode(local, x, ec, mixed ? &pool : nullptr, stats);
        preds[i] = er.predictions[0];
      });
      std::size_t err = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (preds[i] != static_cast<int>(entry.test.labels[i])) ++err;
      errors[m] = err;
    }

    const double counts[3] = {static_cast<double>(base_err), static_cast<double>(errors[0]),
                              static_cast<double>(errors[1])};
    for (int m = 0; m < 3; ++m) {
      SuiteRow row;
      row.corruption = entry.corruption;
      row.severity = entry.severity;
      row.method = method_names[m];
      row.error_percent = 100.0 * counts[m] / static_cast<double>(n);
      row.n_samples = n;
      row.seed = seed;
      method_sums[static_cast<std::size_t>(m)] += row.error_percent;
      rows.push_back(row);
    }
  }

  for (int m = 0; m < 3; ++m) {
    SuiteRow row;
    row.corruption = "average";
    row.severity = 0;
    row.method = method_names[m];
    row.error_percent = method_sums[static_cast<std::size_t>(m)] / static_cast<double>(entries.size());
    row.n_samples = 0;
    for (const SuiteEntry& e : entries) row.n_samples += e.test.size();
    row.seed = seed;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mixttt
