#include "mixttt/network.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "mixttt/errors.hpp"
#include "mixttt/rng.hpp"

namespace mixttt {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kNormMomentum = 0.1;
constexpr std::size_t kKernel = 3;  // 3x3 convs, padding 1 throughout

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

std::size_t conv_out(std::size_t in, std::size_t stride) {
  // kernel 3, padding 1: out = floor((in - 1) / stride) + 1
  return (in - 1) / stride + 1;
}

// Canonical parameter order: per encoder layer (weight, bias[, gamma, beta]),
// then main head, then aux head. Flat offsets and serialized images all
// follow this order.
template <typename State, typename F>
void visit_params(State& s, F&& f) {
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    auto& l = s.layers[i];
    const std::string p = "enc" + std::to_string(i);
    f(p + ".weight", l.weight);
    f(p + ".bias", l.bias);
    if (l.norm) {
      f(p + ".gamma", l.norm->gamma);
      f(p + ".beta", l.norm->beta);
    }
  }
  f("main.weight", s.main_w);
  f("main.bias", s.main_b);
  f("aux.weight", s.aux_w);
  f("aux.bias", s.aux_b);
}

template <typename State, typename F>
void visit_stats(State& s, F&& f) {
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    auto& l = s.layers[i];
    if (l.norm) {
      const std::string p = "enc" + std::to_string(i);
      f(p + ".running_mean", l.norm->running_mean);
      f(p + ".running_var", l.norm->running_var);
    }
  }
}

double activ(Activation a, double x) {
  return a == Activation::smooth ? std::tanh(x) : (x > 0.0 ? x : 0.0);
}

// Derivative expressed through the activation output.
double activ_deriv_from_out(Activation a, double y) {
  return a == Activation::smooth ? 1.0 - y * y : (y > 0.0 ? 1.0 : 0.0);
}

}  // namespace

// ---- spec -------------------------------------------------------------------

void NetworkSpec::validate() const {
  if (input_channels == 0 || input_height == 0 || input_width == 0)
    throw ConfigError("network spec: input shape must be positive");
  if (encoder.empty()) throw ConfigError("network spec: encoder needs at least one layer");
  if (main_classes == 0 || aux_classes == 0)
    throw ConfigError("network spec: head class counts must be positive");
  bool spatial = true;
  std::size_t h = input_height, w = input_width;
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const LayerDesc& l = encoder[i];
    if (l.width == 0) throw ConfigError("network spec: layer " + std::to_string(i) + " has zero width");
    if (l.kind == LayerKind::conv) {
      if (!spatial)
        throw ConfigError("network spec: conv layer " + std::to_string(i) + " after a linear layer");
      if (l.stride == 0 || l.stride > 2)
        throw ConfigError("network spec: conv stride must be 1 or 2");
      h = conv_out(h, l.stride);
      w = conv_out(w, l.stride);
    } else {
      spatial = false;
    }
  }
}

std::size_t NetworkSpec::feature_dim() const { return encoder.back().width; }

std::size_t NetworkSpec::param_count() const {
  validate();
  std::size_t count = 0;
  std::size_t c = input_channels, h = input_height, w = input_width;
  for (const LayerDesc& l : encoder) {
    if (l.kind == LayerKind::conv) {
      count += l.width * c * kKernel * kKernel + l.width;
      h = conv_out(h, l.stride);
      w = conv_out(w, l.stride);
    } else {
      count += l.width * (c * h * w) + l.width;
      h = w = 1;
    }
    if (l.normalize) count += 2 * l.width;
    c = l.width;
  }
  count += main_classes * feature_dim() + main_classes;
  count += aux_classes * feature_dim() + aux_classes;
  return count;
}

NetworkSpec NetworkSpec::desk_default(std::size_t main_classes, std::size_t aux_classes) {
  NetworkSpec spec;
  spec.input_channels = 3;
  spec.input_height = spec.input_width = 32;
  spec.encoder = {
      {LayerKind::conv, 16, 2, true, true},
      {LayerKind::conv, 32, 2, true, true},
      {LayerKind::conv, 64, 2, true, true},
  };
  spec.main_classes = main_classes;
  spec.aux_classes = aux_classes;
  spec.activation = Activation::smooth;
  return spec;
}

std::vector<LayerDesc> parse_encoder_layout(const std::string& text) {
  std::vector<LayerDesc> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    // trim
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    item = item.substr(b, e - b + 1);
    std::stringstream fs(item);
    std::string tok;
    LayerDesc d;
    d.normalize = false;
    d.activated = false;
    if (!std::getline(fs, tok, ':')) throw ConfigError("bad layer descriptor: " + item);
    if (tok == "conv")
      d.kind = LayerKind::conv;
    else if (tok == "linear")
      d.kind = LayerKind::linear;
    else
      throw ConfigError("unknown layer kind '" + tok + "' in descriptor: " + item);
    if (!std::getline(fs, tok, ':')) throw ConfigError("layer descriptor missing width: " + item);
    d.width = static_cast<std::size_t>(std::stoul(tok));
    while (std::getline(fs, tok, ':')) {
      if (tok == "n")
        d.normalize = true;
      else if (tok == "a")
        d.activated = true;
      else if (tok.size() >= 2 && tok[0] == 's')
        d.stride = static_cast<std::size_t>(std::stoul(tok.substr(1)));
      else
        throw ConfigError("unknown layer flag '" + tok + "' in descriptor: " + item);
    }
    out.push_back(d);
  }
  if (out.empty()) throw ConfigError("empty encoder layout");
  return out;
}

std::string encoder_layout_to_string(const std::vector<LayerDesc>& layers) {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) os << ",";
    os << (layers[i].kind == LayerKind::conv ? "conv" : "linear") << ":" << layers[i].width;
    if (layers[i].kind == LayerKind::conv && layers[i].stride != 1) os << ":s" << layers[i].stride;
    if (layers[i].normalize) os << ":n";
    if (layers[i].activated) os << ":a";
  }
  return os.str();
}

// ---- build -------------------------------------------------------------------

std::size_t SplitNetworkState::theta_size() const {
  std::size_t n = 0;
  for (const EncoderLayer& l : layers) {
    n += l.weight.numel() + l.bias.numel();
    if (l.norm) n += l.norm->gamma.numel() + l.norm->beta.numel();
  }
  return n;
}

std::size_t SplitNetworkState::total_param_size() const {
  return theta_size() + main_w.numel() + main_b.numel() + aux_w.numel() + aux_b.numel();
}

SplitNetworkState build_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  SplitNetworkState s;
  s.spec = spec;
  Rng rng(Rng::mix(seed, 0x6e657477));

  auto glorot_fill = [&rng](Tensor& t, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-limit, limit);
  };

  std::size_t c = spec.input_channels, h = spec.input_height, w = spec.input_width;
  for (const LayerDesc& d : spec.encoder) {
    EncoderLayer l;
    l.desc = d;
    l.in_c = c;
    l.in_h = h;
    l.in_w = w;
    if (d.kind == LayerKind::conv) {
      l.weight = Tensor({d.width, c, kKernel, kKernel});
      glorot_fill(l.weight, c * kKernel * kKernel, d.width * kKernel * kKernel);
      l.out_h = conv_out(h, d.stride);
      l.out_w = conv_out(w, d.stride);
    } else {
      const std::size_t in_dim = c * h * w;
      l.weight = Tensor({d.width, in_dim});
      glorot_fill(l.weight, in_dim, d.width);
      l.out_h = l.out_w = 1;
    }
    l.bias = Tensor({d.width});
    l.out_c = d.width;
    if (d.normalize) {
      NormParams np;
      np.gamma = Tensor({d.width});
      np.gamma.fill(1.0);
      np.beta = Tensor({d.width});
      np.running_mean = Tensor({d.width});
      np.running_var = Tensor({d.width});
      np.running_var.fill(1.0);
      l.norm = std::move(np);
    }
    c = l.out_c;
    h = l.out_h;
    w = l.out_w;
    s.layers.push_back(std::move(l));
  }
  const std::size_t fd = spec.feature_dim();
  s.main_w = Tensor({spec.main_classes, fd});
  glorot_fill(s.main_w, fd, spec.main_classes);
  s.main_b = Tensor({spec.main_classes});
  s.aux_w = Tensor({spec.aux_classes, fd});
  glorot_fill(s.aux_w, fd, spec.aux_classes);
  s.aux_b = Tensor({spec.aux_classes});
  return s;
}

// ---- flat parameter view ------------------------------------------------------

std::vector<double> flat_params(const SplitNetworkState& state) {
  std::vector<double> out;
  out.reserve(state.total_param_size());
  visit_params(state, [&](const std::string&, const Tensor& t) {
    out.insert(out.end(), t.vec().begin(), t.vec().end());
  });
  return out;
}

void set_flat_params(SplitNetworkState& state, const std::vector<double>& values) {
  if (values.size() != state.total_param_size())
    throw InputError("set_flat_params: size mismatch");
  std::size_t cursor = 0;
  visit_params(state, [&](const std::string&, Tensor& t) {
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(cursor),
              values.begin() + static_cast<std::ptrdiff_t>(cursor + t.numel()), t.vec().begin());
    cursor += t.numel();
  });
}

void add_scaled_subset(SplitNetworkState& state, const ParamSelector& sel,
                       const std::vector<double>& grad, double scale) {
  if (grad.size() != state.total_param_size())
    throw InputError("add_scaled_subset: gradient must be full-length");
  std::size_t cursor = 0;
  std::size_t si = 0;
  visit_params(state, [&](const std::string&, Tensor& t) {
    const std::size_t lo = cursor, hi = cursor + t.numel();
    while (si < sel.indices.size() && sel.indices[si] < hi) {
      const std::size_t idx = sel.indices[si];
      t[idx - lo] += scale * grad[idx];
      ++si;
    }
    cursor = hi;
  });
}

namespace {

ParamSelector make_range_selector(std::size_t lo, std::size_t hi) {
  ParamSelector sel;
  sel.indices.resize(hi - lo);
  for (std::size_t i = lo; i < hi; ++i) sel.indices[i - lo] = i;
  return sel;
}

}  // namespace

ParamSelector selector_encoder_full(const SplitNetworkState& state) {
  return make_range_selector(0, state.theta_size());
}

ParamSelector selector_all(const SplitNetworkState& state) {
  return make_range_selector(0, state.total_param_size());
}

ParamSelector selector_norm_affine(const SplitNetworkState& state) {
  ParamSelector sel;
  std::size_t cursor = 0;
  visit_params(state, [&](const std::string& name, const Tensor& t) {
    const bool affine = name.size() > 6 && (name.ends_with(".gamma") || name.ends_with(".beta"));
    if (affine) {
      for (std::size_t i = 0; i < t.numel(); ++i) sel.indices.push_back(cursor + i);
    }
    cursor += t.numel();
  });
  if (sel.indices.empty())
    throw ConfigError("norm_affine_only selector on a network without normalization layers");
  return sel;
}

// ---- forward -------------------------------------------------------------------

namespace {

// im2col for a chunk of images [n0, n1); cols is [K x M] row-major with
// K = Cin*9 and M = (n1-n0)*Ho*Wo.
void im2col(const Tensor& x, const EncoderLayer& l, std::size_t n0, std::size_t n1, RowMat& cols) {
  const std::size_t C = l.in_c, H = l.in_h, W = l.in_w;
  const std::size_t Ho = l.out_h, Wo = l.out_w, S = l.desc.stride;
  const std::size_t M = (n1 - n0) * Ho * Wo;
  cols.resize(static_cast<Eigen::Index>(C * kKernel * kKernel), static_cast<Eigen::Index>(M));
  for (std::size_t ci = 0; ci < C; ++ci) {
    for (std::size_t kh = 0; kh < kKernel; ++kh) {
      for (std::size_t kw = 0; kw < kKernel; ++kw) {
        const std::size_t k = (ci * kKernel + kh) * kKernel + kw;
        double* row = cols.data() + k * M;
        for (std::size_t n = n0; n < n1; ++n) {
          const double* img = x.data() + ((n * C + ci) * H) * W;
          for (std::size_t ho = 0; ho < Ho; ++ho) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(ho * S + kh) - 1;
            double* dst = row + ((n - n0) * Ho + ho) * Wo;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) {
              std::fill(dst, dst + Wo, 0.0);
              continue;
            }
            const double* src = img + static_cast<std::size_t>(ih) * W;
            for (std::size_t wo = 0; wo < Wo; ++wo) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(wo * S + kw) - 1;
              dst[wo] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) ? 0.0
                                                                         : src[static_cast<std::size_t>(iw)];
            }
          }
        }
      }
    }
  }
}

// Scatter-add of dcols [K x M] back into dx for images [n0, n1).
void col2im_add(RowMat& dcols, const EncoderLayer& l, std::size_t n0, std::size_t n1, Tensor& dx) {
  const std::size_t C = l.in_c, H = l.in_h, W = l.in_w;
  const std::size_t Ho = l.out_h, Wo = l.out_w, S = l.desc.stride;
  const std::size_t M = (n1 - n0) * Ho * Wo;
  for (std::size_t ci = 0; ci < C; ++ci) {
    for (std::size_t kh = 0; kh < kKernel; ++kh) {
      for (std::size_t kw = 0; kw < kKernel; ++kw) {
        const std::size_t k = (ci * kKernel + kh) * kKernel + kw;
        const double* row = dcols.data() + k * M;
        for (std::size_t n = n0; n < n1; ++n) {
          double* img = dx.data() + ((n * C + ci) * H) * W;
          for (std::size_t ho = 0; ho < Ho; ++ho) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(ho * S + kh) - 1;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
            const double* src = row + ((n - n0) * Ho + ho) * Wo;
            double* dst = img + static_cast<std::size_t>(ih) * W;
            for (std::size_t wo = 0; wo < Wo; ++wo) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(wo * S + kw) - 1;
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
              dst[static_cast<std::size_t>(iw)] += src[wo];
            }
          }
        }
      }
    }
  }
}

std::size_t chunk_images(std::size_t pixels_per_image) {
  return std::max<std::size_t>(1, 8192 / std::max<std::size_t>(1, pixels_per_image));
}

Tensor conv_forward(const Tensor& x, const EncoderLayer& l) {
  const std::size_t N = x.dim(0);
  const std::size_t Ho = l.out_h, Wo = l.out_w, Cout = l.out_c;
  Tensor y({N, Cout, Ho, Wo});
  CMapRM wm(l.weight.data(), static_cast<Eigen::Index>(Cout),
            static_cast<Eigen::Index>(l.in_c * kKernel * kKernel));
  const std::size_t q = chunk_images(Ho * Wo);
  RowMat cols, out_m;
  for (std::size_t n0 = 0; n0 < N; n0 += q) {
    const std::size_t n1 = std::min(N, n0 + q);
    im2col(x, l, n0, n1, cols);
    out_m.noalias() = wm * cols;
    const std::size_t hw = Ho * Wo;
    for (std::size_t n = n0; n < n1; ++n) {
      for (std::size_t co = 0; co < Cout; ++co) {
        const double* src = out_m.data() + co * cols.cols() + (n - n0) * hw;
        double* dst = y.data() + ((n * Cout + co) * hw);
        const double b = l.bias[co];
        for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + b;
      }
    }
  }
  return y;
}

// Accumulates dw/db and returns dx when want_dx.
Tensor conv_backward(const Tensor& x, const Tensor& dy, const EncoderLayer& l, Tensor& dw,
                     Tensor& db, bool want_dx) {
  const std::size_t N = x.dim(0);
  const std::size_t Ho = l.out_h, Wo = l.out_w, Cout = l.out_c;
  const std::size_t K = l.in_c * kKernel * kKernel;
  Tensor dx = want_dx ? Tensor::zeros_like(x) : Tensor();
  CMapRM wm(l.weight.data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(K));
  MapRM dwm(dw.data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(K));
  const std::size_t q = chunk_images(Ho * Wo);
  RowMat cols, dy_m, dcols;
  const std::size_t hw = Ho * Wo;
  for (std::size_t n0 = 0; n0 < N; n0 += q) {
    const std::size_t n1 = std::min(N, n0 + q);
    const std::size_t M = (n1 - n0) * hw;
    dy_m.resize(static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(M));
    for (std::size_t n = n0; n < n1; ++n) {
      for (std::size_t co = 0; co < Cout; ++co) {
        const double* src = dy.data() + ((n * Cout + co) * hw);
        double* dst = dy_m.data() + co * M + (n - n0) * hw;
        std::copy(src, src + hw, dst);
      }
    }
    im2col(x, l, n0, n1, cols);
    dwm.noalias() += dy_m * cols.transpose();
    for (std::size_t co = 0; co < Cout; ++co) {
      double s = 0.0;
      const double* row = dy_m.data() + co * M;
      for (std::size_t i = 0; i < M; ++i) s += row[i];
      db[co] += s;
    }
    if (want_dx) {
      dcols.noalias() = wm.transpose() * dy_m;
      col2im_add(dcols, l, n0, n1, dx);
    }
  }
  return dx;
}

Tensor linear_forward(const Tensor& x, const EncoderLayer& l) {
  const std::size_t N = x.dim(0);
  const std::size_t D = l.weight.dim(1), U = l.out_c;
  Tensor y({N, U, 1, 1});
  CMapRM xm(x.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
  CMapRM wm(l.weight.data(), static_cast<Eigen::Index>(U), static_cast<Eigen::Index>(D));
  MapRM ym(y.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(U));
  ym.noalias() = xm * wm.transpose();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t u = 0; u < U; ++u) y.data()[n * U + u] += l.bias[u];
  return y;
}

Tensor linear_backward(const Tensor& x, const Tensor& dy, const EncoderLayer& l, Tensor& dw,
                       Tensor& db, bool want_dx) {
  const std::size_t N = x.dim(0);
  const std::size_t D = l.weight.dim(1), U = l.out_c;
  CMapRM xm(x.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
  CMapRM wm(l.weight.data(), static_cast<Eigen::Index>(U), static_cast<Eigen::Index>(D));
  CMapRM dym(dy.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(U));
  MapRM dwm(dw.data(), static_cast<Eigen::Index>(U), static_cast<Eigen::Index>(D));
  dwm.noalias() += dym.transpose() * xm;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t u = 0; u < U; ++u) db[u] += dy.data()[n * U + u];
  Tensor dx;
  if (want_dx) {
    dx = Tensor::zeros_like(x);
    MapRM dxm(dx.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
    dxm.noalias() = dym * wm;
  }
  return dx;
}

// Per-channel normalization over (N, H, W). In train mode batch statistics
// are used; eval mode normalizes with the stored running statistics.
void norm_forward(Tensor& z, EncoderLayer& l, Mode mode, bool update_stats, LayerCacheEntry* cache) {
  NormParams& np = *l.norm;
  const std::size_t N = z.dim(0), C = z.dim(1), H = z.dim(2), W = z.dim(3);
  const std::size_t hw = H * W;
  const double m = static_cast<double>(N * hw);
  Tensor mean({C}), var({C}), inv_std({C});
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = z.data() + (n * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      mean[c] = s / m;
      double v = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = z.data() + (n * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = p[i] - mean[c];
          v += d * d;
        }
      }
      var[c] = v / m;
      inv_std[c] = 1.0 / std::sqrt(var[c] + kNormEps);
    }
    if (update_stats) {
      const double unbias = m > 1.0 ? m / (m - 1.0) : 1.0;
      for (std::size_t c = 0; c < C; ++c) {
        np.running_mean[c] = (1.0 - kNormMomentum) * np.running_mean[c] + kNormMomentum * mean[c];
        np.running_var[c] = (1.0 - kNormMomentum) * np.running_var[c] + kNormMomentum * var[c] * unbias;
      }
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = np.running_mean[c];
      var[c] = np.running_var[c];
      inv_std[c] = 1.0 / std::sqrt(var[c] + kNormEps);
    }
  }

  Tensor* x_hat = nullptr;
  if (cache) {
    cache->x_hat = Tensor({N, C, H, W});
    x_hat = &cache->x_hat;
  }
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      double* p = z.data() + (n * C + c) * hw;
      double* xh = x_hat ? x_hat->data() + (n * C + c) * hw : nullptr;
      const double mu = mean[c], is = inv_std[c], g = np.gamma[c], b = np.beta[c];
      for (std::size_t i = 0; i < hw; ++i) {
        const double h = (p[i] - mu) * is;
        if (xh) xh[i] = h;
        p[i] = g * h + b;
      }
    }
  }
  if (cache) {
    cache->inv_std = std::move(inv_std);
    if (mode == Mode::train) {
      cache->batch_mean = std::move(mean);
      cache->batch_var = std::move(var);
    }
  }
}

// dz in-place from dy; accumulates dgamma/dbeta.
void norm_backward(Tensor& dy, const EncoderLayer& l, const LayerCacheEntry& cache, Mode mode,
                   Tensor& dgamma, Tensor& dbeta) {
  const NormParams& np = *l.norm;
  const std::size_t N = dy.dim(0), C = dy.dim(1), H = dy.dim(2), W = dy.dim(3);
  const std::size_t hw = H * W;
  const double m = static_cast<double>(N * hw);
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* pdy = dy.data() + (n * C + c) * hw;
      const double* pxh = cache.x_hat.data() + (n * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += pdy[i];
        sum_dy_xhat += pdy[i] * pxh[i];
      }
    }
    dgamma[c] += sum_dy_xhat;
    dbeta[c] += sum_dy;
    const double g_is = np.gamma[c] * cache.inv_std[c];
    if (mode == Mode::train) {
      const double mean_dy = sum_dy / m;
      const double mean_dy_xhat = sum_dy_xhat / m;
      for (std::size_t n = 0; n < N; ++n) {
        double* pdy = dy.data() + (n * C + c) * hw;
        const double* pxh = cache.x_hat.data() + (n * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i)
          pdy[i] = g_is * (pdy[i] - mean_dy - pxh[i] * mean_dy_xhat);
      }
    } else {
      for (std::size_t n = 0; n < N; ++n) {
        double* pdy = dy.data() + (n * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) pdy[i] *= g_is;
      }
    }
  }
}

}  // namespace

Tensor head_logits(const Tensor& features, const Tensor& w, const Tensor& b) {
  const std::size_t N = features.dim(0), D = features.dim(1), U = w.dim(0);
  Tensor y({N, U});
  CMapRM fm(features.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
  CMapRM wm(w.data(), static_cast<Eigen::Index>(U), static_cast<Eigen::Index>(D));
  MapRM ym(y.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(U));
  ym.noalias() = fm * wm.transpose();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t u = 0; u < U; ++u) y.at(n, u) += b[u];
  return y;
}

Tensor forward_features(SplitNetworkState& state, const Tensor& batch, Mode mode,
                        bool update_stats, ForwardCache* cache) {
  if (batch.rank() != 4 || batch.dim(1) != state.spec.input_channels ||
      batch.dim(2) != state.spec.input_height || batch.dim(3) != state.spec.input_width)
    throw InputError("forward: batch shape " + batch.shape_str() + " does not match network input");
  if (cache) {
    cache->mode = mode;
    cache->batch = batch;
    cache->layers.assign(state.layers.size(), {});
  }
  const Tensor* cur = &batch;
  Tensor buf;
  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    EncoderLayer& l = state.layers[i];
    buf = (l.desc.kind == LayerKind::conv) ? conv_forward(*cur, l) : linear_forward(*cur, l);
    LayerCacheEntry* lc = cache ? &cache->layers[i] : nullptr;
    if (l.norm) norm_forward(buf, l, mode, update_stats && mode == Mode::train, lc);
    if (l.desc.activated) {
      const Activation a = state.spec.activation;
      for (std::size_t k = 0; k < buf.numel(); ++k) buf[k] = activ(a, buf[k]);
    }
    if (cache) {
      cache->layers[i].output = std::move(buf);
      cur = &cache->layers[i].output;
    } else {
      static thread_local Tensor scratch;
      scratch = std::move(buf);
      cur = &scratch;
    }
  }
  // global average pool over the spatial extent
  const std::size_t N = cur->dim(0), C = cur->dim(1), hw = cur->dim(2) * cur->dim(3);
  Tensor features({N, C});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = cur->data() + (n * C + c) * hw;
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
      features.at(n, c) = s / static_cast<double>(hw);
    }
  }
  if (cache) cache->features = features;
  return features;
}

Tensor forward_main(SplitNetworkState& state, const Tensor& batch, Mode mode) {
  return head_logits(forward_features(state, batch, mode), state.main_w, state.main_b);
}

Tensor forward_aux(SplitNetworkState& state, const Tensor& batch, Mode mode) {
  return head_logits(forward_features(state, batch, mode), state.aux_w, state.aux_b);
}

ForwardResult forward_all(SplitNetworkState& state, const Tensor& batch, Mode mode,
                          bool update_stats, ForwardCache& cache) {
  ForwardResult r;
  r.features = forward_features(state, batch, mode, update_stats, &cache);
  r.main_logits = head_logits(r.features, state.main_w, state.main_b);
  r.aux_logits = head_logits(r.features, state.aux_w, state.aux_b);
  return r;
}

// ---- backward ----------------------------------------------------------------

Gradients backward(const SplitNetworkState& state, const ForwardCache& cache,
                   const OutputGrads& out_grads, bool want_input_grad) {
  const std::size_t N = cache.features.dim(0);
  const std::size_t D = state.spec.feature_dim();

  struct LayerGrads {
    Tensor dw, db, dgamma, dbeta;
  };
  std::vector<LayerGrads> lg(state.layers.size());
  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    lg[i].dw = Tensor::zeros_like(state.layers[i].weight);
    lg[i].db = Tensor::zeros_like(state.layers[i].bias);
    if (state.layers[i].norm) {
      lg[i].dgamma = Tensor::zeros_like(state.layers[i].norm->gamma);
      lg[i].dbeta = Tensor::zeros_like(state.layers[i].norm->beta);
    }
  }
  Tensor dmain_w = Tensor::zeros_like(state.main_w), dmain_b = Tensor::zeros_like(state.main_b);
  Tensor daux_w = Tensor::zeros_like(state.aux_w), daux_b = Tensor::zeros_like(state.aux_b);

  // d loss / d features: direct term plus both head chains.
  Tensor d_feat({N, D});
  if (out_grads.d_features.numel()) {
    if (!out_grads.d_features.same_shape(d_feat)) throw InputError("backward: d_features shape");
    d_feat = out_grads.d_features;
  }
  CMapRM fm(cache.features.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
  MapRM dfm(d_feat.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
  auto apply_head = [&](const Tensor& dlogits, const Tensor& w, Tensor& dw, Tensor& db) {
    const std::size_t U = w.dim(0);
    CMapRM dlm(dlogits.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(U));
    CMapRM wm(w.data(), static_cast<Eigen::Index>(U), static_cast<Eigen::Index>(D));
    MapRM dwm(dw.data(), static_cast<Eigen::Index>(U), static_cast<Eigen::Index>(D));
    dwm.noalias() += dlm.transpose() * fm;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t u = 0; u < U; ++u) db[u] += dlogits.at(n, u);
    dfm.noalias() += dlm * wm;
  };
  if (out_grads.d_main_logits.numel()) apply_head(out_grads.d_main_logits, state.main_w, dmain_w, dmain_b);
  if (out_grads.d_aux_logits.numel()) apply_head(out_grads.d_aux_logits, state.aux_w, daux_w, daux_b);

  // un-pool into the last layer's spatial geometry
  const EncoderLayer& last = state.layers.back();
  const std::size_t hw_last = last.out_h * last.out_w;
  Tensor d_cur({N, last.out_c, last.out_h, last.out_w});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < last.out_c; ++c) {
      const double g = d_feat.at(n, c) / static_cast<double>(hw_last);
      double* p = d_cur.data() + (n * last.out_c + c) * hw_last;
      for (std::size_t k = 0; k < hw_last; ++k) p[k] = g;
    }
  }

  Tensor input_grad;
  for (std::size_t ri = state.layers.size(); ri-- > 0;) {
    const EncoderLayer& l = state.layers[ri];
    const LayerCacheEntry& lc = cache.layers[ri];
    if (l.desc.activated) {
      const Activation a = state.spec.activation;
      for (std::size_t k = 0; k < d_cur.numel(); ++k)
        d_cur[k] *= activ_deriv_from_out(a, lc.output[k]);
    }
    if (l.norm) norm_backward(d_cur, l, lc, cache.mode, lg[ri].dgamma, lg[ri].dbeta);
    const Tensor& layer_input = (ri == 0) ? cache.batch : cache.layers[ri - 1].output;
    const bool want_dx = (ri > 0) || want_input_grad;
    Tensor d_prev = (l.desc.kind == LayerKind::conv)
                        ? conv_backward(layer_input, d_cur, l, lg[ri].dw, lg[ri].db, want_dx)
                        : linear_backward(layer_input, d_cur, l, lg[ri].dw, lg[ri].db, want_dx);
    if (ri == 0) {
      if (want_input_grad) input_grad = std::move(d_prev);
    } else {
      d_cur = std::move(d_prev);  // shaped like the previous layer's output
    }
  }

  Gradients g;
  g.flat.reserve(state.total_param_size());
  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    g.flat.insert(g.flat.end(), lg[i].dw.vec().begin(), lg[i].dw.vec().end());
    g.flat.insert(g.flat.end(), lg[i].db.vec().begin(), lg[i].db.vec().end());
    if (state.layers[i].norm) {
      g.flat.insert(g.flat.end(), lg[i].dgamma.vec().begin(), lg[i].dgamma.vec().end());
      g.flat.insert(g.flat.end(), lg[i].dbeta.vec().begin(), lg[i].dbeta.vec().end());
    }
  }
  g.flat.insert(g.flat.end(), dmain_w.vec().begin(), dmain_w.vec().end());
  g.flat.insert(g.flat.end(), dmain_b.vec().begin(), dmain_b.vec().end());
  g.flat.insert(g.flat.end(), daux_w.vec().begin(), daux_w.vec().end());
  g.flat.insert(g.flat.end(), daux_b.vec().begin(), daux_b.vec().end());
  g.input_grad = std::move(input_grad);
  return g;
}

double encoder_grad_norm(const SplitNetworkState& state, const std::vector<double>& flat_grad) {
  const std::size_t n = state.theta_size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += flat_grad[i] * flat_grad[i];
  return std::sqrt(s);
}

SubsetGrad grad_params(SplitNetworkState& state, const BatchLoss& loss, const Tensor& batch,
                       Mode mode, const ParamSelector& subset) {
  ForwardCache cache;
  ForwardResult out = forward_all(state, batch, mode, false, cache);
  OutputGrads og;
  const double value = loss.evaluate(out, &og);
  if (!std::isfinite(value)) throw NumericalError("grad_params: non-finite loss value");
  Gradients g = backward(state, cache, og, false);
  SubsetGrad sg;
  sg.indices = subset.indices;
  sg.values.resize(subset.indices.size());
  for (std::size_t i = 0; i < subset.indices.size(); ++i) sg.values[i] = g.flat[subset.indices[i]];
  return sg;
}

Tensor grad_input(SplitNetworkState& state, const BatchLoss& loss, const Tensor& batch, Mode mode) {
  ForwardCache cache;
  ForwardResult out = forward_all(state, batch, mode, false, cache);
  OutputGrads og;
  const double value = loss.evaluate(out, &og);
  if (!std::isfinite(value)) throw NumericalError("grad_input: non-finite loss value");
  Gradients g = backward(state, cache, og, true);
  return std::move(g.input_grad);
}

// ---- snapshot / restore --------------------------------------------------------

std::size_t ParameterImage::value_count() const {
  std::size_t n = 0;
  for (const NamedTensor& t : tensors) n += t.value.numel();
  return n;
}

ParameterImage snapshot(const SplitNetworkState& state) {
  ParameterImage img;
  visit_params(state, [&](const std::string& name, const Tensor& t) {
    img.tensors.push_back(NamedTensor{name, t});
  });
  visit_stats(state, [&](const std::string& name, const Tensor& t) {
    img.tensors.push_back(NamedTensor{name, t});
  });
  return img;
}

void restore(SplitNetworkState& state, const ParameterImage& image) {
  auto take = [&image](const std::string& name, Tensor& dst) {
    const NamedTensor* t = find_tensor(image.tensors, name);
    if (!t) throw InputError("restore: image is missing tensor \"" + name + "\"");
    if (t->value.shape() != dst.shape())
      throw InputError("restore: shape mismatch for \"" + name + "\"");
    dst = t->value;
  };
  visit_params(state, take);
  visit_stats(state, take);
}

void save_network(const std::string& path, const SplitNetworkState& state,
                  const std::vector<NamedTensor>& extra) {
  ParameterImage img = snapshot(state);
  std::vector<NamedTensor> all = std::move(img.tensors);
  all.insert(all.end(), extra.begin(), extra.end());
  save_tensor_file(path, all);
}

std::vector<NamedTensor> load_network(const std::string& path, SplitNetworkState& state) {
  std::vector<NamedTensor> all = load_tensor_file(path);
  ParameterImage img;
  std::vector<NamedTensor> leftovers;
  std::vector<std::string> wanted;
  visit_params(state, [&](const std::string& name, const Tensor&) { wanted.push_back(name); });
  visit_stats(state, [&](const std::string& name, const Tensor&) { wanted.push_back(name); });
  for (NamedTensor& t : all) {
    if (std::find(wanted.begin(), wanted.end(), t.name) != wanted.end())
      img.tensors.push_back(std::move(t));
    else
      leftovers.push_back(std::move(t));
  }
  try {
    restore(state, img);
  } catch (const InputError& e) {
    throw FormatError(std::string("checkpoint does not match network spec: ") + e.what());
  }
  return leftovers;
}

}  // namespace mixttt
