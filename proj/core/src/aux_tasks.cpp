#include "mixttt/aux_tasks.hpp"

#include <algorithm>
#include <cmath>

#include "mixttt/errors.hpp"

namespace mixttt {

namespace {

constexpr double kLogEps = 1e-12;   // log stabilization for saturated softmax
constexpr double kNormSqEps = 1e-12;  // smooth floor for embedding L2 norms

void softmax_rows(const Tensor& logits, Tensor& probs) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  probs = Tensor({N, K});
  for (std::size_t n = 0; n < N; ++n) {
    double mx = logits.at(n, 0);
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits.at(n, k));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double e = std::exp(logits.at(n, k) - mx);
      probs.at(n, k) = e;
      z += e;
    }
    for (std::size_t k = 0; k < K; ++k) probs.at(n, k) /= z;
  }
}

double cross_entropy_impl(const Tensor& logits, const std::vector<std::uint32_t>& labels,
                          Tensor* d_logits) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) throw InputError("cross_entropy: label count mismatch");
  Tensor probs;
  softmax_rows(logits, probs);
  double loss = 0.0;
  if (d_logits) *d_logits = Tensor({N, K});
  for (std::size_t n = 0; n < N; ++n) {
    const std::uint32_t y = labels[n];
    if (y >= K) throw InputError("cross_entropy: label out of range");
    const double py = probs.at(n, y);
    loss += -std::log(py + kLogEps);
    if (d_logits) {
      // d/dz of -log(softmax_y + eps), exact including the stabilizer
      const double c = py / (py + kLogEps);
      for (std::size_t k = 0; k < K; ++k) {
        const double delta = (k == y) ? 1.0 : 0.0;
        d_logits->at(n, k) = c * (probs.at(n, k) - delta) / static_cast<double>(N);
      }
    }
  }
  return loss / static_cast<double>(N);
}

double entropy_impl(const Tensor& logits, Tensor* d_logits) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  Tensor probs;
  softmax_rows(logits, probs);
  double loss = 0.0;
  if (d_logits) *d_logits = Tensor({N, K});
  std::vector<double> a(K);
  for (std::size_t n = 0; n < N; ++n) {
    double row = 0.0, pa = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double p = probs.at(n, k);
      const double l = std::log(p + kLogEps);
      row -= p * l;
      a[k] = l + p / (p + kLogEps);
      pa += p * a[k];
    }
    loss += row;
    if (d_logits) {
      for (std::size_t k = 0; k < K; ++k)
        d_logits->at(n, k) = -probs.at(n, k) * (a[k] - pa) / static_cast<double>(N);
    }
  }
  return loss / static_cast<double>(N);
}

}  // namespace

AuxTaskKind aux_task_kind_from_string(const std::string& name) {
  if (name == "rotation") return AuxTaskKind::rotation;
  if (name == "entropy_min") return AuxTaskKind::entropy_min;
  if (name == "contrastive_align") return AuxTaskKind::contrastive_align;
  throw ConfigError("unknown auxiliary task: " + name);
}

std::string aux_task_kind_to_string(AuxTaskKind kind) {
  switch (kind) {
    case AuxTaskKind::rotation: return "rotation";
    case AuxTaskKind::entropy_min: return "entropy_min";
    case AuxTaskKind::contrastive_align: return "contrastive_align";
  }
  throw ConfigError("unknown auxiliary task");
}

void AuxTaskSpec::validate() const {
  ratio_spec.validate();
  if (kind == AuxTaskKind::entropy_min && param_subset != ParamSubset::norm_affine_only)
    throw ConfigError("entropy_min updates normalization affine parameters only");
  if (kind == AuxTaskKind::rotation && param_subset != ParamSubset::encoder_full)
    throw ConfigError("rotation updates the full encoder");
  if (temperature <= 0.0) throw ConfigError("contrastive temperature must be positive");
  if (weight_contrastive < 0.0 || weight_align < 0.0)
    throw ConfigError("loss weights must be nonnegative");
}

AuxTaskSpec AuxTaskSpec::rotation_default() {
  AuxTaskSpec s;
  s.kind = AuxTaskKind::rotation;
  s.param_subset = ParamSubset::encoder_full;
  s.ratio_spec = {0.7, 1.0, RatioGranularity::per_pair};
  return s;
}

AuxTaskSpec AuxTaskSpec::entropy_min_default() {
  AuxTaskSpec s;
  s.kind = AuxTaskKind::entropy_min;
  s.param_subset = ParamSubset::norm_affine_only;
  s.ratio_spec = {0.95, 1.0, RatioGranularity::per_pair};
  return s;
}

AuxTaskSpec AuxTaskSpec::contrastive_align_default() {
  AuxTaskSpec s;
  s.kind = AuxTaskKind::contrastive_align;
  s.param_subset = ParamSubset::encoder_full;
  s.ratio_spec = {0.9, 1.0, RatioGranularity::per_pair};
  return s;
}

// ---- rotation ------------------------------------------------------------------

Tensor rotate_k90(const Tensor& batch, int k) {
  if (batch.rank() != 4) throw InputError("rotate_k90: batch must be [N,C,H,W]");
  const std::size_t N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  if (H != W) throw InputError("rotate_k90: images must be square");
  k = ((k % 4) + 4) % 4;
  Tensor out = Tensor::zeros_like(batch);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
          double v;
          switch (k) {
            case 0: v = batch.at(n, c, i, j); break;
            case 1: v = batch.at(n, c, j, W - 1 - i); break;       // 90 CCW
            case 2: v = batch.at(n, c, H - 1 - i, W - 1 - j); break;
            default: v = batch.at(n, c, H - 1 - j, i); break;      // 270 CCW
          }
          out.at(n, c, i, j) = v;
        }
      }
    }
  }
  return out;
}

RotatedBatch rotation_expand(const Tensor& batch) {
  if (batch.rank() != 4) throw InputError("rotation_expand: batch must be [N,C,H,W]");
  if (batch.dim(2) != batch.dim(3)) throw InputError("rotation_expand: images must be square");
  const std::size_t B = batch.dim(0);
  const std::size_t px = batch.numel() / B;
  RotatedBatch out;
  out.images = Tensor({4 * B, batch.dim(1), batch.dim(2), batch.dim(3)});
  out.labels.resize(4 * B);
  for (int k = 0; k < 4; ++k) {
    const Tensor rot = rotate_k90(batch, k);
    std::copy(rot.data(), rot.data() + rot.numel(),
              out.images.data() + static_cast<std::size_t>(k) * B * px);
    for (std::size_t i = 0; i < B; ++i) out.labels[static_cast<std::size_t>(k) * B + i] = static_cast<std::uint32_t>(k);
  }
  return out;
}

// ---- losses ----------------------------------------------------------------------

double cross_entropy(const Tensor& logits, const std::vector<std::uint32_t>& labels) {
  return cross_entropy_impl(logits, labels, nullptr);
}

double entropy_loss(const Tensor& logits) { return entropy_impl(logits, nullptr); }

double AuxCrossEntropyLoss::evaluate(const ForwardResult& out, OutputGrads* grads) const {
  return cross_entropy_impl(out.aux_logits, labels_, grads ? &grads->d_aux_logits : nullptr);
}

double MainCrossEntropyLoss::evaluate(const ForwardResult& out, OutputGrads* grads) const {
  return cross_entropy_impl(out.main_logits, labels_, grads ? &grads->d_main_logits : nullptr);
}

double MainEntropyLoss::evaluate(const ForwardResult& out, OutputGrads* grads) const {
  return entropy_impl(out.main_logits, grads ? &grads->d_main_logits : nullptr);
}

double JointPretrainLoss::evaluate(const ForwardResult& out, OutputGrads* grads) const {
  const std::size_t N = out.main_logits.dim(0);
  if (main_rows_ > N || main_labels_.size() != main_rows_)
    throw InputError("pretrain loss: bad main row bookkeeping");
  if (aux_labels_.size() != N - main_rows_)
    throw InputError("pretrain loss: bad aux row bookkeeping");

  // main CE over the leading rows
  Tensor main_slice({main_rows_, out.main_logits.dim(1)});
  std::copy(out.main_logits.data(), out.main_logits.data() + main_slice.numel(), main_slice.data());
  Tensor d_main;
  const double l_main = cross_entropy_impl(main_slice, main_labels_, grads ? &d_main : nullptr);

  double l_aux = 0.0;
  Tensor d_aux;
  const std::size_t aux_rows = N - main_rows_;
  if (aux_rows > 0 && beta_ != 0.0) {
    Tensor aux_slice({aux_rows, out.aux_logits.dim(1)});
    std::copy(out.aux_logits.data() + main_rows_ * out.aux_logits.dim(1),
              out.aux_logits.data() + N * out.aux_logits.dim(1), aux_slice.data());
    l_aux = cross_entropy_impl(aux_slice, aux_labels_, grads ? &d_aux : nullptr);
  }

  if (grads) {
    grads->d_main_logits = Tensor({N, out.main_logits.dim(1)});
    if (main_rows_ > 0)
      std::copy(d_main.data(), d_main.data() + d_main.numel(), grads->d_main_logits.data());
    grads->d_aux_logits = Tensor({N, out.aux_logits.dim(1)});
    if (aux_rows > 0 && beta_ != 0.0) {
      double* dst = grads->d_aux_logits.data() + main_rows_ * out.aux_logits.dim(1);
      for (std::size_t i = 0; i < d_aux.numel(); ++i) dst[i] = beta_ * d_aux[i];
    }
  }
  return l_main + beta_ * l_aux;
}

// ---- entropy-min subset ------------------------------------------------------------

ParamSelector collect_affine_params(const SplitNetworkState& state) {
  return selector_norm_affine(state);
}

// ---- contrastive + alignment --------------------------------------------------------

std::vector<NamedTensor> feature_stats_to_tensors(const TrainFeatureStats& stats) {
  return {NamedTensor{"feat_stats.mean", stats.mean}, NamedTensor{"feat_stats.var", stats.var}};
}

TrainFeatureStats feature_stats_from_tensors(const std::vector<NamedTensor>& tensors) {
  const NamedTensor* mean = find_tensor(tensors, "feat_stats.mean");
  const NamedTensor* var = find_tensor(tensors, "feat_stats.var");
  if (!mean || !var) throw FormatError("feature stats tensors missing");
  return TrainFeatureStats{mean->value, var->value};
}

double nt_xent_loss(const Tensor& features, double temperature, Tensor* d_features) {
  const std::size_t R = features.dim(0), D = features.dim(1);
  if (R % 2 != 0 || R < 4)
    throw InputError("nt_xent_loss: needs an even row count >= 4 (views then counterparts)");
  const std::size_t B = R / 2;

  // normalized embeddings with a smooth norm floor
  Tensor z({R, D});
  std::vector<double> g(R);
  for (std::size_t i = 0; i < R; ++i) {
    double sq = kNormSqEps;
    for (std::size_t d = 0; d < D; ++d) sq += features.at(i, d) * features.at(i, d);
    g[i] = 1.0 / std::sqrt(sq);
    for (std::size_t d = 0; d < D; ++d) z.at(i, d) = features.at(i, d) * g[i];
  }

  Tensor sim({R, R});
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < R; ++j) {
      double s = 0.0;
      for (std::size_t d = 0; d < D; ++d) s += z.at(i, d) * z.at(j, d);
      sim.at(i, j) = s / temperature;
    }

  auto positive = [B](std::size_t i) { return i < B ? i + B : i - B; };

  double loss = 0.0;
  Tensor d_sim;
  if (d_features) d_sim = Tensor({R, R});
  for (std::size_t i = 0; i < R; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < R; ++j)
      if (j != i) mx = std::max(mx, sim.at(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < R; ++j)
      if (j != i) denom += std::exp(sim.at(i, j) - mx);
    const std::size_t p = positive(i);
    loss += -(sim.at(i, p) - mx) + std::log(denom);
    if (d_features) {
      for (std::size_t j = 0; j < R; ++j) {
        if (j == i) continue;
        const double w = std::exp(sim.at(i, j) - mx) / denom;
        d_sim.at(i, j) = (w - (j == p ? 1.0 : 0.0)) / static_cast<double>(R);
      }
    }
  }
  loss /= static_cast<double>(R);

  if (d_features) {
    *d_features = Tensor({R, D});
    // dz_i = (1/tau) * sum_j (d_sim[i][j] + d_sim[j][i]) z_j
    Tensor dz({R, D});
    for (std::size_t i = 0; i < R; ++i) {
      for (std::size_t j = 0; j < R; ++j) {
        const double c = (d_sim.at(i, j) + d_sim.at(j, i)) / temperature;
        if (c == 0.0) continue;
        for (std::size_t d = 0; d < D; ++d) dz.at(i, d) += c * z.at(j, d);
      }
    }
    // back through normalization: df = g*dz - g*(z . dz)*z
    for (std::size_t i = 0; i < R; ++i) {
      double zdz = 0.0;
      for (std::size_t d = 0; d < D; ++d) zdz += z.at(i, d) * dz.at(i, d);
      for (std::size_t d = 0; d < D; ++d)
        d_features->at(i, d) = g[i] * (dz.at(i, d) - zdz * z.at(i, d));
    }
  }
  return loss;
}

double moment_alignment_loss(const Tensor& features, const TrainFeatureStats& stats,
                             Tensor* d_features) {
  const std::size_t N = features.dim(0), D = features.dim(1);
  if (stats.mean.numel() != D || stats.var.numel() != D)
    throw InputError("moment_alignment_loss: stats dimension mismatch");
  std::vector<double> mean(D, 0.0), var(D, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d) mean[d] += features.at(n, d);
  for (std::size_t d = 0; d < D; ++d) mean[d] /= static_cast<double>(N);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d) {
      const double r = features.at(n, d) - mean[d];
      var[d] += r * r;
    }
  for (std::size_t d = 0; d < D; ++d) var[d] /= static_cast<double>(N);

  double loss = 0.0;
  for (std::size_t d = 0; d < D; ++d) {
    const double dm = mean[d] - stats.mean[d];
    const double dv = var[d] - stats.var[d];
    loss += dm * dm + dv * dv;
  }
  loss /= static_cast<double>(D);

  if (d_features) {
    *d_features = Tensor({N, D});
    for (std::size_t d = 0; d < D; ++d) {
      const double dm = mean[d] - stats.mean[d];
      const double dv = var[d] - stats.var[d];
      for (std::size_t n = 0; n < N; ++n) {
        const double centered = features.at(n, d) - mean[d];
        d_features->at(n, d) =
            (2.0 * dm / static_cast<double>(N) + 4.0 * dv * centered / static_cast<double>(N)) /
            static_cast<double>(D);
      }
    }
  }
  return loss;
}

double ContrastiveAlignLoss::evaluate(const ForwardResult& out, OutputGrads* grads) const {
  const std::size_t R = out.features.dim(0), D = out.features.dim(1);
  if (R % 2 != 0) throw InputError("contrastive_align: feature rows must pair up");
  const std::size_t B = R / 2;
  if (B < 2 && w_con_ != 0.0)
    throw InputError("contrastive term needs a batch of at least 2");

  double loss = 0.0;
  Tensor d_total;
  if (grads) d_total = Tensor({R, D});

  if (w_con_ != 0.0) {
    Tensor d_con;
    loss += w_con_ * nt_xent_loss(out.features, tau_, grads ? &d_con : nullptr);
    if (grads)
      for (std::size_t i = 0; i < d_total.numel(); ++i) d_total[i] += w_con_ * d_con[i];
  }
  if (w_align_ != 0.0) {
    if (!stats_) throw InputError("contrastive_align: training feature stats required");
    // alignment acts on the counterpart (mixed) half
    Tensor mixed({B, D});
    std::copy(out.features.data() + B * D, out.features.data() + R * D, mixed.data());
    Tensor d_align;
    loss += w_align_ * moment_alignment_loss(mixed, *stats_, grads ? &d_align : nullptr);
    if (grads) {
      double* dst = d_total.data() + B * D;
      for (std::size_t i = 0; i < d_align.numel(); ++i) dst[i] += w_align_ * d_align[i];
    }
  }
  if (grads) grads->d_features = std::move(d_total);
  return loss;
}

double contrastive_alignment_loss(SplitNetworkState& state, const Tensor& views,
                                  const Tensor& mixed, const TrainFeatureStats& stats,
                                  double w_contrastive, double w_align, double temperature) {
  if (views.dim(0) != mixed.dim(0)) throw InputError("contrastive_alignment_loss: row mismatch");
  ForwardCache cache;
  const Tensor batch = concat_rows(views, mixed);
  ForwardResult out = forward_all(state, batch, Mode::train, false, cache);
  ContrastiveAlignLoss loss(&stats, w_contrastive, w_align, temperature);
  return loss.evaluate(out, nullptr);
}

Tensor augment_crop_flip(const Tensor& batch, Rng& rng) {
  if (batch.rank() != 4) throw InputError("augment_crop_flip: batch must be [N,C,H,W]");
  const std::size_t N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  constexpr std::size_t pad = 4;
  Tensor out = Tensor::zeros_like(batch);
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t dy = static_cast<std::size_t>(rng.uniform_index(2 * pad + 1));
    const std::size_t dx = static_cast<std::size_t>(rng.uniform_index(2 * pad + 1));
    const bool flip = rng.uniform() < 0.5;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h + dy) - static_cast<std::ptrdiff_t>(pad);
        for (std::size_t w = 0; w < W; ++w) {
          const std::size_t wsrc = flip ? (W - 1 - w) : w;
          const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(wsrc + dx) - static_cast<std::ptrdiff_t>(pad);
          double v = 0.0;
          if (sh >= 0 && sh < static_cast<std::ptrdiff_t>(H) && sw >= 0 && sw < static_cast<std::ptrdiff_t>(W))
            v = batch.at(n, c, static_cast<std::size_t>(sh), static_cast<std::size_t>(sw));
          out.at(n, c, h, w) = v;
        }
      }
    }
  }
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank()) throw InputError("concat_rows: rank mismatch");
  for (std::size_t i = 1; i < a.rank(); ++i)
    if (a.dim(i) != b.dim(i)) throw InputError("concat_rows: shape mismatch");
  std::vector<std::size_t> shape = a.shape();
  shape[0] = a.dim(0) + b.dim(0);
  Tensor out(shape);
  std::copy(a.data(), a.data() + a.numel(), out.data());
  std::copy(b.data(), b.data() + b.numel(), out.data() + a.numel());
  return out;
}

}  // namespace mixttt
