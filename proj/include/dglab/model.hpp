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

// Small 3D encoder-decoder segmentation backbone with a bottleneck feature
// tap and hand-written reverse-mode gradients.
//
// Architecture for depth L (C_l = base_channels * channel_growth^l):
//
//   enc_l:       conv3x3x3(C_{l-1} -> C_l) + SiLU, then 2x average pool
//   bottleneck:  conv3x3x3(C_{L-1} -> latent) + SiLU        <- latent tap
//   dec_l:       conv3x3x3(-> C_l) at the coarse level, nearest 2x upsample,
//                + enc_l skip, SiLU
//   head:        conv1x1x1(C_0 -> 1), sigmoid
//
// The network is templated on the scalar type: float for training, double
// for finite-difference verification.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dglab/volume.hpp"

namespace dglab {

/// Initial foreground probability of an untrained network.
inline constexpr double kHeadPrior = 0.01;

struct BackboneConfig {
  Shape3 in_shape{32, 32, 32};
  int base_channels = 4;
  int depth = 2;
  int latent_channels = 16;
  int channel_growth = 2;

  void validate() const;
  [[nodiscard]] int level_channels(int level) const;
  [[nodiscard]] Shape3 level_shape(int level) const;
  [[nodiscard]] Shape3 latent_shape() const { return level_shape(depth); }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

struct ParamEntry {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
  std::vector<int> shape;
};

/// Deterministic name -> slice map for the flat parameter vector.
class ParamLayout {
 public:
  static std::shared_ptr<const ParamLayout> for_config(const BackboneConfig& c);

  [[nodiscard]] const std::vector<ParamEntry>& entries() const { return entries_; }
  [[nodiscard]] std::size_t total() const { return total_; }
  [[nodiscard]] const ParamEntry& find(const std::string& name) const;
  /// SHA-256 of the textual layout (names, shapes, offsets).
  [[nodiscard]] std::string digest() const;

  friend bool operator==(const ParamLayout& a, const ParamLayout& b) {
    return a.digest() == b.digest();
  }

 private:
  void add(std::string name, std::vector<int> shape);
  std::vector<ParamEntry> entries_;
  std::size_t total_ = 0;
};

template <class T>
struct ParamVector {
  std::vector<T> values;
  std::shared_ptr<const ParamLayout> layout;

  [[nodiscard]] std::size_t size() const { return values.size(); }
  [[nodiscard]] std::span<T> slice(const std::string& name) {
    const auto& e = layout->find(name);
    return {values.data() + e.offset, e.size};
  }
  [[nodiscard]] std::span<const T> slice(const std::string& name) const {
    const auto& e = layout->find(name);
    return {values.data() + e.offset, e.size};
  }
};

/// Converts between scalar types with the same layout.
template <class To, class From>
ParamVector<To> cast_params(const ParamVector<From>& p) {
  return {std::vector<To>(p.values.begin(), p.values.end()), p.layout};
}

enum class Network { kStudent, kTeacher };
const char* to_string(Network n);

/// Latent features (channels, D', H', W') in double precision.
struct FeatureTensor {
  int channels = 0;
  Shape3 shape;
  std::vector<double> data;
  Network source_network = Network::kStudent;
  Variant source_variant = Variant::kSource;

  [[nodiscard]] bool all_finite() const;
};

/// Foreground probabilities, same spatial shape as the input.
struct Prediction {
  Shape3 shape;
  std::vector<double> probs;
};

/// Per-parameter-tensor gradients keyed by layout entry name.
template <class T>
using NamedGradients = std::map<std::string, std::vector<T>>;

template <class T>
class Backbone {
 public:
  explicit Backbone(BackboneConfig config);

  [[nodiscard]] const BackboneConfig& config() const { return config_; }
  [[nodiscard]] const std::shared_ptr<const ParamLayout>& layout() const {
    return layout_;
  }
  [[nodiscard]] std::size_t num_params() const { return layout_->total(); }

  /// He-style uniform init for conv weights; zero conv biases; head bias at
  /// logit(kHeadPrior).
  [[nodiscard]] ParamVector<T> init_params(std::uint64_t seed) const;
  [[nodiscard]] ParamVector<T> zero_params() const;

  /// Activations retained for the backward pass.
  struct Tape {
    std::vector<std::vector<T>> enc_in;    // input of enc_l
    std::vector<std::vector<T>> enc_pre;   // pre-activation of enc_l
    std::vector<std::vector<T>> enc_out;   // post-activation (skip)
    std::vector<T> bott_in;
    std::vector<T> bott_pre;
    std::vector<std::vector<T>> dec_in;    // coarse input of dec_l
    std::vector<std::vector<T>> dec_pre;
    std::vector<T> head_in;
  };

  struct Output {
    std::vector<T> logits;
    std::vector<T> probs;
    std::vector<T> latent;
  };

  /// Pure function of (params, image). Fills `tape` when given.
  Output forward(const ParamVector<T>& params, std::span<const T> image,
                 Tape* tape = nullptr) const;
  Output forward(const ParamVector<T>& params, const Volume& image,
                 Tape* tape = nullptr) const;

  /// Reverse pass. Either upstream gradient may be empty (treated as zero).
  /// Returns a gradient for every layout entry.
  NamedGradients<T> backward(const ParamVector<T>& params, const Tape& tape,
                             std::span<const T> grad_logits,
                             std::span<const T> grad_latent) const;

 private:
  BackboneConfig config_;
  std::shared_ptr<const ParamLayout> layout_;
};

extern template class Backbone<float>;
extern template class Backbone<double>;

/// Network-agnostic wrapper returning double-precision contract types.
template <class T>
std::pair<Prediction, FeatureTensor> forward(const Backbone<T>& net,
                                             const ParamVector<T>& params,
                                             const Volume& image,
                                             Network who = Network::kStudent,
                                             Variant variant = Variant::kSource);

enum class GradOrigin { kSrc, kTrg, kOther };

/// Flat gradient in ParamVector layout order.
struct GradientVector {
  std::vector<double> values;
  GradOrigin origin = GradOrigin::kOther;
};

/// Assembles named gradients into layout order; any missing or mis-sized
/// entry is an InternalError.
template <class T>
GradientVector flatten_gradient(const ParamLayout& layout,
                                const NamedGradients<T>& grads,
                                GradOrigin origin = GradOrigin::kOther);

// Checkpoint: <stem>.params (LE float32, layout order) + <stem>.json sidecar.
void save_checkpoint(const std::filesystem::path& stem,
                     const ParamVector<float>& params,
                     const BackboneConfig& config, std::int64_t step,
                     const nlohmann::json& extra = {});

struct LoadedCheckpoint {
  BackboneConfig config;
  ParamVector<float> params;
  std::int64_t step = 0;
  nlohmann::json sidecar;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& stem);

}  // namespace dglab
