// Copyright 2026 The dglab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dglab/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include <Eigen/Core>

#include "dglab/error.hpp"
#include "dglab/io.hpp"

namespace dglab {

namespace fs = std::filesystem;
using detail::ensure;
using detail::require;

// ---------------------------------------------------------------------------
// Config and layout

void BackboneConfig::validate() const {
  require(base_channels >= 4, "base_channels must be >= 4");
  require(depth >= 2, "depth must be >= 2");
  require(latent_channels >= 1, "latent_channels must be >= 1");
  require(channel_growth >= 1, "channel_growth must be >= 1");
  const int div = 1 << depth;
  require(in_shape.d > 0 && in_shape.h > 0 && in_shape.w > 0 &&
              in_shape.d % div == 0 && in_shape.h % div == 0 &&
              in_shape.w % div == 0,
          "in_shape " + in_shape.str() + " must be divisible by 2^depth = " +
              std::to_string(div));
}

int BackboneConfig::level_channels(int level) const {
  int c = base_channels;
  for (int i = 0; i < level; ++i) c *= channel_growth;
  return c;
}

Shape3 BackboneConfig::level_shape(int level) const {
  return {in_shape.d >> level, in_shape.h >> level, in_shape.w >> level};
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = nlohmann::json{{"in_shape", {c.in_shape.d, c.in_shape.h, c.in_shape.w}},
                     {"base_channels", c.base_channels},
                     {"depth", c.depth},
                     {"latent_channels", c.latent_channels},
                     {"channel_growth", c.channel_growth}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  c = BackboneConfig{};
  if (j.contains("in_shape")) {
    const auto& s = j.at("in_shape");
    if (!s.is_array() || s.size() != 3) {
      throw ConfigError("field 'in_shape' must be a [D, H, W] array");
    }
    c.in_shape = {s[0].get<int>(), s[1].get<int>(), s[2].get<int>()};
  }
  c.base_channels = j.value("base_channels", c.base_channels);
  c.depth = j.value("depth", c.depth);
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.channel_growth = j.value("channel_growth", c.channel_growth);
}

void ParamLayout::add(std::string name, std::vector<int> shape) {
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  entries_.push_back({std::move(name), total_, n, std::move(shape)});
  total_ += n;
}

std::shared_ptr<const ParamLayout> ParamLayout::for_config(
    const BackboneConfig& c) {
  c.validate();
  auto layout = std::make_shared<ParamLayout>();
  for (int l = 0; l < c.depth; ++l) {
    const int cin = l == 0 ? 1 : c.level_channels(l - 1);
    const int cout = c.level_channels(l);
    layout->add("enc" + std::to_string(l) + ".weight", {cout, cin, 3, 3, 3});
    layout->add("enc" + std::to_string(l) + ".bias", {cout});
  }
  layout->add("bottleneck.weight",
              {c.latent_channels, c.level_channels(c.depth - 1), 3, 3, 3});
  layout->add("bottleneck.bias", {c.latent_channels});
  for (int l = c.depth - 1; l >= 0; --l) {
    const int cin = l == c.depth - 1 ? c.latent_channels : c.level_channels(l + 1);
    const int cout = c.level_channels(l);
    layout->add("dec" + std::to_string(l) + ".weight", {cout, cin, 3, 3, 3});
    layout->add("dec" + std::to_string(l) + ".bias", {cout});
  }
  layout->add("head.weight", {1, c.level_channels(0)});
  layout->add("head.bias", {1});
  return layout;
}

const ParamEntry& ParamLayout::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw InternalError("no parameter named '" + name + "' in layout");
}

std::string ParamLayout::digest() const {
  std::ostringstream os;
  for (const auto& e : entries_) {
    os << e.name << '@' << e.offset << ':';
    for (int s : e.shape) os << s << 'x';
    os << ';';
  }
  return sha256_hex(os.str());
}

const char* to_string(Network n) {
  return n == Network::kStudent ? "STUDENT" : "TEACHER";
}

bool FeatureTensor::all_finite() const {
  return std::all_of(data.begin(), data.end(),
                     [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Kernels. Tensors are (C, D, H, W) row-major.

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// cols is (C*27, P); row index c*27 + kz*9 + ky*3 + kx.
template <class T>
void im2col(const T* in, int channels, Shape3 s, T* cols) {
  const std::size_t P = s.voxels();
  for (int c = 0; c < channels; ++c) {
    const T* src = in + static_cast<std::size_t>(c) * P;
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          T* row = cols + (static_cast<std::size_t>(c) * 27 + kz * 9 + ky * 3 + kx) * P;
          const int dx = kx - 1;
          const int x_lo = std::max(0, -dx);
          const int x_hi = std::min(s.w, s.w - dx);
          for (int z = 0; z < s.d; ++z) {
            const int zz = z + kz - 1;
            for (int y = 0; y < s.h; ++y) {
              const int yy = y + ky - 1;
              T* out = row + s.index(z, y, 0);
              if (zz < 0 || zz >= s.d || yy < 0 || yy >= s.h) {
                std::fill(out, out + s.w, T(0));
                continue;
              }
              const T* line = src + s.index(zz, yy, 0);
              for (int x = 0; x < x_lo; ++x) out[x] = T(0);
              for (int x = x_lo; x < x_hi; ++x) out[x] = line[x + dx];
              for (int x = x_hi; x < s.w; ++x) out[x] = T(0);
            }
          }
        }
  }
}

// Adjoint of im2col: accumulates into `grad_in` (must be zeroed by caller).
template <class T>
void col2im(const T* cols, int channels, Shape3 s, T* grad_in) {
  const std::size_t P = s.voxels();
  for (int c = 0; c < channels; ++c) {
    T* dst = grad_in + static_cast<std::size_t>(c) * P;
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const T* row = cols + (static_cast<std::size_t>(c) * 27 + kz * 9 + ky * 3 + kx) * P;
          const int dx = kx - 1;
          const int x_lo = std::max(0, -dx);
          const int x_hi = std::min(s.w, s.w - dx);
          for (int z = 0; z < s.d; ++z) {
            const int zz = z + kz - 1;
            if (zz < 0 || zz >= s.d) continue;
            for (int y = 0; y < s.h; ++y) {
              const int yy = y + ky - 1;
              if (yy < 0 || yy >= s.h) continue;
              const T* g = row + s.index(z, y, 0);
              T* line = dst + s.index(zz, yy, 0);
              for (int x = x_lo; x < x_hi; ++x) line[x + dx] += g[x];
            }
          }
        }
  }
}

template <class T>
std::vector<T> conv3_forward(std::span<const T> in, int cin, int cout, Shape3 s,
                             std::span<const T> weight, std::span<const T> bias) {
  const auto P = static_cast<Eigen::Index>(s.voxels());
  std::vector<T> cols(static_cast<std::size_t>(cin) * 27 * s.voxels());
  im2col(in.data(), cin, s, cols.data());
  std::vector<T> out(static_cast<std::size_t>(cout) * s.voxels());
  MapMat<T> o(out.data(), cout, P);
  o.noalias() = CMapMat<T>(weight.data(), cout, cin * 27) *
                CMapMat<T>(cols.data(), cin * 27, P);
  for (int c = 0; c < cout; ++c) o.row(c).array() += bias[static_cast<std::size_t>(c)];
  return out;
}

// Accumulates dW, db; returns d(in) when requested (else empty).
template <class T>
std::vector<T> conv3_backward(std::span<const T> in, int cin, int cout,
                              Shape3 s, std::span<const T> weight,
                              std::span<const T> grad_out, std::vector<T>& dW,
                              std::vector<T>& db, bool need_input_grad) {
  const auto P = static_cast<Eigen::Index>(s.voxels());
  const Eigen::Index K = static_cast<Eigen::Index>(cin) * 27;
  std::vector<T> cols(static_cast<std::size_t>(K) * s.voxels());
  im2col(in.data(), cin, s, cols.data());
  CMapMat<T> go(grad_out.data(), cout, P);
  MapMat<T>(dW.data(), cout, K).noalias() +=
      go * CMapMat<T>(cols.data(), K, P).transpose();
  for (int c = 0; c < cout; ++c) db[static_cast<std::size_t>(c)] += go.row(c).sum();
  if (!need_input_grad) return {};
  MapMat<T>(cols.data(), K, P).noalias() =
      CMapMat<T>(weight.data(), cout, K).transpose() * go;
  std::vector<T> grad_in(static_cast<std::size_t>(cin) * s.voxels(), T(0));
  col2im(cols.data(), cin, s, grad_in.data());
  return grad_in;
}

template <class T>
std::vector<T> avg_pool2(std::span<const T> in, int channels, Shape3 s) {
  const Shape3 o{s.d / 2, s.h / 2, s.w / 2};
  std::vector<T> out(static_cast<std::size_t>(channels) * o.voxels());
  for (int c = 0; c < channels; ++c) {
    const T* src = in.data() + static_cast<std::size_t>(c) * s.voxels();
    T* dst = out.data() + static_cast<std::size_t>(c) * o.voxels();
    for (int z = 0; z < o.d; ++z)
      for (int y = 0; y < o.h; ++y)
        for (int x = 0; x < o.w; ++x) {
          T acc = 0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e)
                acc += src[s.index(2 * z + a, 2 * y + b, 2 * x + e)];
          dst[o.index(z, y, x)] = acc / T(8);
        }
  }
  return out;
}

// Adjoint of avg_pool2; `s` is the fine shape.
template <class T>
void avg_pool2_backward(std::span<const T> grad_out, int channels, Shape3 s,
                        std::vector<T>& grad_in) {
  const Shape3 o{s.d / 2, s.h / 2, s.w / 2};
  for (int c = 0; c < channels; ++c) {
    const T* g = grad_out.data() + static_cast<std::size_t>(c) * o.voxels();
    T* dst = grad_in.data() + static_cast<std::size_t>(c) * s.voxels();
    for (int z = 0; z < s.d; ++z)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
          dst[s.index(z, y, x)] += g[o.index(z / 2, y / 2, x / 2)] / T(8);
  }
}

// Nearest-neighbour 2x; `s` is the coarse shape.
template <class T>
std::vector<T> upsample2(std::span<const T> in, int channels, Shape3 s) {
  const Shape3 f{s.d * 2, s.h * 2, s.w * 2};
  std::vector<T> out(static_cast<std::size_t>(channels) * f.voxels());
  for (int c = 0; c < channels; ++c) {
    const T* src = in.data() + static_cast<std::size_t>(c) * s.voxels();
    T* dst = out.data() + static_cast<std::size_t>(c) * f.voxels();
    for (int z = 0; z < f.d; ++z)
      for (int y = 0; y < f.h; ++y)
        for (int x = 0; x < f.w; ++x)
          dst[f.index(z, y, x)] = src[s.index(z / 2, y / 2, x / 2)];
  }
  return out;
}

template <class T>
std::vector<T> upsample2_backward(std::span<const T> grad_out, int channels,
                                  Shape3 s) {
  const Shape3 f{s.d * 2, s.h * 2, s.w * 2};
  std::vector<T> out(static_cast<std::size_t>(channels) * s.voxels(), T(0));
  for (int c = 0; c < channels; ++c) {
    const T* g = grad_out.data() + static_cast<std::size_t>(c) * f.voxels();
    T* dst = out.data() + static_cast<std::size_t>(c) * s.voxels();
    for (int z = 0; z < f.d; ++z)
      for (int y = 0; y < f.h; ++y)
        for (int x = 0; x < f.w; ++x)
          dst[s.index(z / 2, y / 2, x / 2)] += g[f.index(z, y, x)];
  }
  return out;
}

template <class T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                   : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
std::vector<T> silu(std::span<const T> pre) {
  std::vector<T> out(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) out[i] = pre[i] * sigmoid(pre[i]);
  return out;
}

// grad *= silu'(pre)
template <class T>
void silu_backward(std::span<const T> pre, std::vector<T>& grad) {
  for (std::size_t i = 0; i < pre.size(); ++i) {
    const T s = sigmoid(pre[i]);
    grad[i] *= s * (T(1) + pre[i] * (T(1) - s));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Backbone

template <class T>
Backbone<T>::Backbone(BackboneConfig config)
    : config_(config), layout_(ParamLayout::for_config(config)) {}

template <class T>
ParamVector<T> Backbone<T>::zero_params() const {
  return {std::vector<T>(layout_->total(), T(0)), layout_};
}

template <class T>
ParamVector<T> Backbone<T>::init_params(std::uint64_t seed) const {
  ParamVector<T> p = zero_params();
  std::mt19937_64 rng(derive_seed(seed, 0x1417));
  for (const auto& e : layout_->entries()) {
    if (e.shape.size() < 2) continue;  // biases stay zero
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < e.shape.size(); ++i)
      fan_in *= static_cast<std::size_t>(e.shape[i]);
    const bool head = e.name.rfind("head.", 0) == 0;
    const double bound = (head ? 1.0 : std::sqrt(6.0)) /
                         std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < e.size; ++i)
      p.values[e.offset + i] = static_cast<T>(u(rng));
  }
  // Start the head at the foreground prior instead of p = 0.5.
  p.slice("head.bias")[0] = static_cast<T>(std::log(kHeadPrior / (1.0 - kHeadPrior)));
  return p;
}

template <class T>
typename Backbone<T>::Output Backbone<T>::forward(const ParamVector<T>& params,
                                                  const Volume& image,
                                                  Tape* tape) const {
  const std::vector<T> x(image.data.begin(), image.data.end());
  require(image.shape == config_.in_shape,
          "input shape " + image.shape.str() + " does not match backbone in_shape " +
              config_.in_shape.str());
  return forward(params, std::span<const T>(x), tape);
}

template <class T>
typename Backbone<T>::Output Backbone<T>::forward(const ParamVector<T>& params,
                                                  std::span<const T> image,
                                                  Tape* tape) const {
  const auto& c = config_;
  require(image.size() == c.in_shape.voxels(),
          "input size does not match backbone in_shape " + c.in_shape.str());
  ensure(params.layout && params.layout->digest() == layout_->digest(),
         "parameter layout does not match backbone");
  const int L = c.depth;
  Tape local;
  Tape& t = tape ? *tape : local;
  t = Tape{};
  t.enc_in.resize(L);
  t.enc_pre.resize(L);
  t.enc_out.resize(L);
  t.dec_in.resize(L);
  t.dec_pre.resize(L);

  std::vector<T> x(image.begin(), image.end());
  for (int l = 0; l < L; ++l) {
    const std::string n = "enc" + std::to_string(l);
    const int cin = l == 0 ? 1 : c.level_channels(l - 1);
    const int cout = c.level_channels(l);
    const Shape3 s = c.level_shape(l);
    t.enc_in[l] = std::move(x);
    t.enc_pre[l] = conv3_forward<T>(t.enc_in[l], cin, cout, s,
                                    params.slice(n + ".weight"),
                                    params.slice(n + ".bias"));
    t.enc_out[l] = silu<T>(t.enc_pre[l]);
    x = avg_pool2<T>(t.enc_out[l], cout, s);
  }
  t.bott_in = std::move(x);
  t.bott_pre = conv3_forward<T>(t.bott_in, c.level_channels(L - 1),
                                c.latent_channels, c.level_shape(L),
                                params.slice("bottleneck.weight"),
                                params.slice("bottleneck.bias"));
  Output out;
  out.latent = silu<T>(t.bott_pre);

  std::vector<T> h = out.latent;
  int hc = c.latent_channels;
  for (int l = L - 1; l >= 0; --l) {
    const std::string n = "dec" + std::to_string(l);
    const int cout = c.level_channels(l);
    t.dec_in[l] = std::move(h);
    const auto conv = conv3_forward<T>(t.dec_in[l], hc, cout, c.level_shape(l + 1),
                                       params.slice(n + ".weight"),
                                       params.slice(n + ".bias"));
    t.dec_pre[l] = upsample2<T>(conv, cout, c.level_shape(l + 1));
    for (std::size_t i = 0; i < t.dec_pre[l].size(); ++i)
      t.dec_pre[l][i] += t.enc_out[l][i];
    h = silu<T>(t.dec_pre[l]);
    hc = cout;
  }
  t.head_in = std::move(h);

  const std::size_t P = c.in_shape.voxels();
  const auto hw = params.slice("head.weight");
  const T hb = params.slice("head.bias")[0];
  out.logits.assign(P, hb);
  for (int ch = 0; ch < hc; ++ch) {
    const T w = hw[static_cast<std::size_t>(ch)];
    const T* src = t.head_in.data() + static_cast<std::size_t>(ch) * P;
    for (std::size_t i = 0; i < P; ++i) out.logits[i] += w * src[i];
  }
  out.probs.resize(P);
  for (std::size_t i = 0; i < P; ++i) out.probs[i] = sigmoid(out.logits[i]);
  return out;
}

template <class T>
NamedGradients<T> Backbone<T>::backward(const ParamVector<T>& params,
                                        const Tape& tape,
                                        std::span<const T> grad_logits,
                                        std::span<const T> grad_latent) const {
  const auto& c = config_;
  const int L = c.depth;
  ensure(tape.enc_in.size() == static_cast<std::size_t>(L),
         "backward called with an empty tape");
  NamedGradients<T> g;
  for (const auto& e : layout_->entries()) g[e.name].assign(e.size, T(0));

  std::vector<std::vector<T>> d_enc(L);
  for (int l = 0; l < L; ++l) d_enc[l].assign(tape.enc_out[l].size(), T(0));
  std::vector<T> dz(tape.bott_pre.size(), T(0));

  if (!grad_logits.empty()) {
    const std::size_t P = c.in_shape.voxels();
    ensure(grad_logits.size() == P, "grad_logits has wrong size");
    const int c0 = c.level_channels(0);
    const auto hw = params.slice("head.weight");
    auto& dhw = g["head.weight"];
    T dhb = 0;
    std::vector<T> dh(static_cast<std::size_t>(c0) * P);
    for (std::size_t i = 0; i < P; ++i) dhb += grad_logits[i];
    for (int ch = 0; ch < c0; ++ch) {
      const T* hin = tape.head_in.data() + static_cast<std::size_t>(ch) * P;
      T* d = dh.data() + static_cast<std::size_t>(ch) * P;
      T acc = 0;
      const T w = hw[static_cast<std::size_t>(ch)];
      for (std::size_t i = 0; i < P; ++i) {
        acc += grad_logits[i] * hin[i];
        d[i] = grad_logits[i] * w;
      }
      dhw[static_cast<std::size_t>(ch)] = acc;
    }
    g["head.bias"][0] = dhb;

    for (int l = 0; l < L; ++l) {
      const std::string n = "dec" + std::to_string(l);
      const int cin = l == L - 1 ? c.latent_channels : c.level_channels(l + 1);
      const int cout = c.level_channels(l);
      silu_backward<T>(tape.dec_pre[l], dh);
      for (std::size_t i = 0; i < dh.size(); ++i) d_enc[l][i] += dh[i];
      const auto d_conv = upsample2_backward<T>(dh, cout, c.level_shape(l + 1));
      dh = conv3_backward<T>(tape.dec_in[l], cin, cout, c.level_shape(l + 1),
                             params.slice(n + ".weight"), d_conv,
                             g[n + ".weight"], g[n + ".bias"], true);
    }
    dz = std::move(dh);
  }
  if (!grad_latent.empty()) {
    ensure(grad_latent.size() == dz.size(), "grad_latent has wrong size");
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += grad_latent[i];
  }

  silu_backward<T>(tape.bott_pre, dz);
  auto dx = conv3_backward<T>(tape.bott_in, c.level_channels(L - 1),
                              c.latent_channels, c.level_shape(L),
                              params.slice("bottleneck.weight"), dz,
                              g["bottleneck.weight"], g["bottleneck.bias"], true);
  for (int l = L - 1; l >= 0; --l) {
    const std::string n = "enc" + std::to_string(l);
    const int cin = l == 0 ? 1 : c.level_channels(l - 1);
    const int cout = c.level_channels(l);
    const Shape3 s = c.level_shape(l);
    avg_pool2_backward<T>(dx, cout, s, d_enc[l]);
    silu_backward<T>(tape.enc_pre[l], d_enc[l]);
    dx = conv3_backward<T>(tape.enc_in[l], cin, cout, s,
                           params.slice(n + ".weight"), d_enc[l],
                           g[n + ".weight"], g[n + ".bias"], l > 0);
  }
  return g;
}

template class Backbone<float>;
template class Backbone<double>;

template <class T>
std::pair<Prediction, FeatureTensor> forward(const Backbone<T>& net,
                                             const ParamVector<T>& params,
                                             const Volume& image, Network who,
                                             Variant variant) {
  auto out = net.forward(params, image);
  Prediction p{image.shape, std::vector<double>(out.probs.begin(), out.probs.end())};
  FeatureTensor z;
  z.channels = net.config().latent_channels;
  z.shape = net.config().latent_shape();
  z.data.assign(out.latent.begin(), out.latent.end());
  z.source_network = who;
  z.source_variant = variant;
  return {std::move(p), std::move(z)};
}

template std::pair<Prediction, FeatureTensor> forward(
    const Backbone<float>&, const ParamVector<float>&, const Volume&, Network,
    Variant);
template std::pair<Prediction, FeatureTensor> forward(
    const Backbone<double>&, const ParamVector<double>&, const Volume&,
    Network, Variant);

template <class T>
GradientVector flatten_gradient(const ParamLayout& layout,
                                const NamedGradients<T>& grads,
                                GradOrigin origin) {
  GradientVector out;
  out.origin = origin;
  out.values.resize(layout.total());
  for (const auto& e : layout.entries()) {
    const auto it = grads.find(e.name);
    ensure(it != grads.end(), "missing gradient for parameter '" + e.name + "'");
    ensure(it->second.size() == e.size,
           "gradient for '" + e.name + "' has wrong size");
    std::copy(it->second.begin(), it->second.end(),
              out.values.begin() + static_cast<std::ptrdiff_t>(e.offset));
  }
  return out;
}

template GradientVector flatten_gradient(const ParamLayout&,
                                         const NamedGradients<float>&, GradOrigin);
template GradientVector flatten_gradient(const ParamLayout&,
                                         const NamedGradients<double>&, GradOrigin);

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const fs::path& stem, const ParamVector<float>& params,
                     const BackboneConfig& config, std::int64_t step,
                     const nlohmann::json& extra) {
  ensure(params.layout != nullptr, "checkpoint params have no layout");
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  write_f32_le(fs::path(stem.string() + ".params"), params.values);
  nlohmann::json side{{"config", config},
                      {"step", step},
                      {"num_params", params.values.size()},
                      {"layout_digest", params.layout->digest()}};
  if (extra.is_object()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) side[it.key()] = it.value();
  }
  write_json(fs::path(stem.string() + ".json"), side);
}

LoadedCheckpoint load_checkpoint(const fs::path& stem) {
  const fs::path side_path(stem.string() + ".json");
  if (!fs::exists(side_path)) {
    throw ConfigError("checkpoint not found: " + side_path.string());
  }
  LoadedCheckpoint ck;
  ck.sidecar = read_json(side_path);
  ck.config = ck.sidecar.at("config").get<BackboneConfig>();
  ck.step = ck.sidecar.value("step", std::int64_t{0});
  auto layout = ParamLayout::for_config(ck.config);
  if (ck.sidecar.value("layout_digest", std::string{}) != layout->digest()) {
    throw ConfigError("checkpoint layout digest mismatch for " + stem.string());
  }
  ck.params.values = read_f32_le(fs::path(stem.string() + ".params"));
  if (ck.params.values.size() != layout->total()) {
    throw ConfigError("checkpoint parameter count mismatch for " + stem.string());
  }
  ck.params.layout = std::move(layout);
  return ck;
}

}  // namespace dglab
