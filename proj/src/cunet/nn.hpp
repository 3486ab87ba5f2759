// Stateful layer modules over the op layer, plus the named registry that
// checkpointing, the optimizer, and parameter accounting all walk.
#pragma once

#include <functional>
#include <string>

#include "ops.hpp"

namespace cunet {

template <typename T>
struct Registry {
  struct Param {
    std::string name;
    Tensor<T> tensor;
  };
  struct Buffer {
    std::string name;
    std::vector<T>* data;
  };
  struct Mask {
    std::string name;
    std::vector<uint8_t>* data;
  };
  struct Counter {
    std::string name;
    std::function<int64_t()> get;
    std::function<void(int64_t)> set;
  };

  std::vector<Param> params;
  std::vector<Buffer> buffers;
  std::vector<Mask> masks;
  std::vector<Counter> counters;

  void add_param(std::string name, Tensor<T> t) { params.push_back({std::move(name), std::move(t)}); }

  int64_t total_param_count() const {
    int64_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
  }
};

enum class Mode { kTrain, kEval };

template <typename T>
class Conv2d {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int padding, int groups, bool with_bias,
         Rng& rng)
      : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride), padding_(padding),
        groups_(groups) {
    require(in_ch % groups == 0 && out_ch % groups == 0,
            "Conv2d: groups must divide in and out channels");
    double fan_in = double(in_ch / groups) * kernel * kernel;
    weight_ = Tensor<T>::randn({out_ch, in_ch / groups, kernel, kernel}, rng,
                               std::sqrt(2.0 / fan_in));
    weight_.set_requires_grad(true);
    if (with_bias) {
      bias_ = Tensor<T>::zeros({out_ch});
      bias_.set_requires_grad(true);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d(x, weight_, bias_, stride_, padding_, groups_);
  }

  void collect(Registry<T>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".weight", weight_);
    if (bias_.defined()) reg.add_param(prefix + ".bias", bias_);
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  int out_channels() const { return out_ch_; }

 private:
  int in_ch_, out_ch_, kernel_, stride_, padding_, groups_;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

// Weight layout [Ci, Co, k, k]; output spatial (in-1)*stride + k before any crop.
template <typename T>
class ConvTranspose2d {
 public:
  ConvTranspose2d(int in_ch, int out_ch, int kernel, int stride, Rng& rng)
      : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride) {
    double fan_in = double(in_ch) * kernel * kernel;
    weight_ = Tensor<T>::randn({in_ch, out_ch, kernel, kernel}, rng, std::sqrt(2.0 / fan_in));
    weight_.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv_transpose2d(x, weight_, stride_); }

  void collect(Registry<T>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".weight", weight_);
  }

  Tensor<T>& weight() { return weight_; }
  int out_channels() const { return out_ch_; }

 private:
  int in_ch_, out_ch_, kernel_, stride_;
  Tensor<T> weight_;
};

template <typename T>
class BatchNorm2d {
 public:
  explicit BatchNorm2d(int channels, T momentum = T(0.9), T eps = T(1e-5))
      : channels_(channels), momentum_(momentum), eps_(eps),
        running_mean_(size_t(channels), T(0)), running_var_(size_t(channels), T(1)) {
    gamma_ = Tensor<T>::full({channels}, T(1));
    gamma_.set_requires_grad(true);
    beta_ = Tensor<T>::zeros({channels});
    beta_.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    return batchnorm2d(x, gamma_, beta_, running_mean_, running_var_, stats_ready_,
                       mode == Mode::kTrain, momentum_, eps_);
  }

  void collect(Registry<T>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".gamma", gamma_);
    reg.add_param(prefix + ".beta", beta_);
    reg.buffers.push_back({prefix + ".running_mean", &running_mean_});
    reg.buffers.push_back({prefix + ".running_var", &running_var_});
    reg.counters.push_back({prefix + ".stats_ready", [this] { return int64_t(stats_ready_); },
                            [this](int64_t v) { stats_ready_ = (v != 0); }});
  }

  int channels() const { return channels_; }

 private:
  int channels_;
  T momentum_, eps_;
  Tensor<T> gamma_, beta_;
  std::vector<T> running_mean_, running_var_;
  bool stats_ready_ = false;
};

}  // namespace cunet
