// Learned group convolution: a 1x1 convolution whose per-group input
// connectivity is learned during training by staged magnitude pruning.
// After the C-1 condensing stages each filter group keeps 1/C of its inputs,
// and the layer can be re-packed into an index-select + grouped conv.
#pragma once

#include "nn.hpp"

namespace cunet {

// Epoch plan: the C-1 condensing stages occupy the first half of training
// (each total/(2(C-1)) epochs); the remainder is the optimization stage.
struct CondenseSchedule {
  int total_epochs = 0;
  std::vector<int> stage_boundaries;  // pruning fires at the start of these epochs
  double lasso_coefficient = 1e-5;

  static CondenseSchedule standard(int total_epochs, int condense_factor, double lambda) {
    require(total_epochs > 0, "schedule: total_epochs must be positive");
    require(condense_factor >= 1, "schedule: condensation factor must be >= 1");
    CondenseSchedule s;
    s.total_epochs = total_epochs;
    s.lasso_coefficient = lambda;
    int stages = condense_factor - 1;
    if (stages > 0) {
      require(total_epochs >= 2 * stages,
              "schedule: too few epochs for " + std::to_string(stages) + " condensing stages");
      for (int i = 1; i <= stages; ++i)
        s.stage_boundaries.push_back(i * total_epochs / (2 * stages));
    }
    s.validate();
    return s;
  }

  void validate() const {
    int prev = 0;
    for (int b : stage_boundaries) {
      require(b > prev, "schedule: stage boundaries must be strictly increasing and positive");
      require(b < total_epochs, "schedule: stage boundary beyond training run");
      prev = b;
    }
  }

  bool is_boundary(int epoch) const {
    return std::find(stage_boundaries.begin(), stage_boundaries.end(), epoch) !=
           stage_boundaries.end();
  }
};

namespace detail {
// Group-lasso penalty with gradient: sum over (group, input channel) of the
// Euclidean norm of that column within the group, masked entries excluded.
// Subgradient at an exactly-zero column norm is taken as 0.
template <typename T>
Tensor<T> group_lasso(const Tensor<T>& w, std::shared_ptr<const std::vector<uint8_t>> mask,
                      int out_ch, int in_ch, int groups) {
  const int per_group = out_ch / groups;
  std::vector<double> norms(size_t(groups) * in_ch, 0.0);
  const T* wp = w.data();
  double total = 0.0;
  for (int g = 0; g < groups; ++g) {
    for (int i = 0; i < in_ch; ++i) {
      if (!(*mask)[size_t(g * per_group) * in_ch + i]) continue;
      double s = 0.0;
      for (int o = g * per_group; o < (g + 1) * per_group; ++o) {
        double v = double(wp[int64_t(o) * in_ch + i]);
        s += v * v;
      }
      norms[size_t(g) * in_ch + i] = std::sqrt(s);
      total += norms[size_t(g) * in_ch + i];
    }
  }
  Tensor<T> out = Tensor<T>::scalar(T(total));
  auto saved = std::make_shared<std::vector<double>>(std::move(norms));
  auto backward = [saved, mask, in_ch, groups, per_group](typename Tensor<T>::Node& self) {
    T* dw = Tensor<T>::parent_grad(self, 0);
    if (!dw) return;
    const T g = self.grad[0];
    const T* wp = self.parents[0].data();
    for (int grp = 0; grp < groups; ++grp)
      for (int i = 0; i < in_ch; ++i) {
        double nrm = (*saved)[size_t(grp) * in_ch + i];
        if (nrm <= 0.0 || !(*mask)[size_t(grp * per_group) * in_ch + i]) continue;
        for (int o = grp * per_group; o < (grp + 1) * per_group; ++o)
          dw[int64_t(o) * in_ch + i] += g * T(double(wp[int64_t(o) * in_ch + i]) / nrm);
      }
  };
  Tensor<T>::finish_op(out, {w}, "group_lasso", backward);
  return out;
}
}  // namespace detail

// Re-packed inference form of a fully condensed layer: per-group channel
// gather followed by a standard grouped 1x1 convolution.
template <typename T>
struct CondensedLayer {
  std::vector<std::vector<int>> retained;  // per-group input channel indices, ascending
  Tensor<T> packed_weight;                 // [out, in/C, 1, 1]
  int groups = 1;

  Tensor<T> forward(const Tensor<T>& x) const {
    std::vector<int> flat;
    for (const auto& g : retained) flat.insert(flat.end(), g.begin(), g.end());
    Tensor<T> gathered = gather_channels(x, flat);
    return conv2d(gathered, packed_weight, 1, 0, groups);
  }

  int64_t param_count() const { return packed_weight.numel(); }
};

template <typename T>
class LearnedGroupConv {
 public:
  LearnedGroupConv(int in_ch, int out_ch, int groups, int condense_factor, Rng& rng)
      : in_ch_(in_ch), out_ch_(out_ch), groups_(groups), condense_factor_(condense_factor) {
    require(groups >= 1 && condense_factor >= 1, "lgconv: M and C must be >= 1");
    if (in_ch % condense_factor != 0)
      fail("lgconv: condensation factor ", std::to_string(condense_factor),
           " must divide input channels ", std::to_string(in_ch));
    if (in_ch % groups != 0)
      fail("lgconv: group count ", std::to_string(groups), " must divide input channels ",
           std::to_string(in_ch));
    if (out_ch % groups != 0)
      fail("lgconv: group count ", std::to_string(groups), " must divide output channels ",
           std::to_string(out_ch));
    weight_ = Tensor<T>::randn({out_ch, in_ch, 1, 1}, rng, std::sqrt(2.0 / double(in_ch)));
    weight_.set_requires_grad(true);
    mask_ = std::make_shared<std::vector<uint8_t>>(size_t(out_ch) * in_ch, uint8_t(1));
  }

  // Dense masked forward: conv2d(input, weight .* mask, groups=1).
  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.dim(1) != in_ch_)
      fail("lgconv: expected ", std::to_string(in_ch_), " input channels, got ",
           std::to_string(x.dim(1)));
    return conv2d(x, masked_weight(), 1, 0, 1);
  }

  Tensor<T> masked_weight() const {
    Tensor<T> m = Tensor<T>::zeros({out_ch_, in_ch_, 1, 1});
    T* mp = m.data();
    for (size_t i = 0; i < mask_->size(); ++i) mp[i] = T((*mask_)[i]);
    return mul(weight_, m);
  }

  // score[g][i] = mean over the group's filters of |w[o][i]|; pruned columns 0.
  std::vector<double> importance_scores() const {
    const int per_group = out_ch_ / groups_;
    std::vector<double> scores(size_t(groups_) * in_ch_, 0.0);
    const T* wp = weight_.data();
    for (int g = 0; g < groups_; ++g)
      for (int i = 0; i < in_ch_; ++i) {
        if (!(*mask_)[size_t(g * per_group) * in_ch_ + i]) continue;
        double s = 0.0;
        for (int o = g * per_group; o < (g + 1) * per_group; ++o)
          s += std::abs(double(wp[int64_t(o) * in_ch_ + i]));
        scores[size_t(g) * in_ch_ + i] = s / double(per_group);
      }
    return scores;
  }

  struct PruneReport {
    std::vector<std::vector<int>> removed_per_group;
  };

  // Mask out the in/C lowest-importance active columns per group. Ties break
  // toward the lower channel index; masked weights are zeroed immediately.
  PruneReport condense_stage() {
    if (completed_stages_ >= condense_factor_ - 1)
      fail("lgconv: all ", std::to_string(condense_factor_ - 1), " condensing stages already run");
    const int per_group = out_ch_ / groups_;
    const int to_remove = in_ch_ / condense_factor_;
    auto scores = importance_scores();
    PruneReport report;
    report.removed_per_group.resize(size_t(groups_));
    for (int g = 0; g < groups_; ++g) {
      std::vector<int> active;
      for (int i = 0; i < in_ch_; ++i)
        if ((*mask_)[size_t(g * per_group) * in_ch_ + i]) active.push_back(i);
      std::sort(active.begin(), active.end(), [&](int a, int b) {
        double sa = scores[size_t(g) * in_ch_ + a], sb = scores[size_t(g) * in_ch_ + b];
        return sa != sb ? sa < sb : a < b;
      });
      for (int r = 0; r < to_remove; ++r) {
        int ch = active[size_t(r)];
        for (int o = g * per_group; o < (g + 1) * per_group; ++o)
          (*mask_)[size_t(o) * in_ch_ + ch] = 0;
        report.removed_per_group[size_t(g)].push_back(ch);
      }
      std::sort(report.removed_per_group[size_t(g)].begin(),
                report.removed_per_group[size_t(g)].end());
    }
    ++completed_stages_;
    apply_mask();
    return report;
  }

  Tensor<T> group_lasso_penalty() const {
    return detail::group_lasso(weight_, mask_, out_ch_, in_ch_, groups_);
  }

  // Zero the stored weights at masked positions (idempotent).
  void apply_mask() {
    T* wp = weight_.data();
    for (size_t i = 0; i < mask_->size(); ++i)
      if (!(*mask_)[i]) wp[i] = T(0);
  }

  void zero_masked_grad() {
    if (!weight_.has_grad()) return;
    T* gp = weight_.grad().data();
    for (size_t i = 0; i < mask_->size(); ++i)
      if (!(*mask_)[i]) gp[i] = T(0);
  }

  CondensedLayer<T> to_condensed() const {
    if (completed_stages_ != condense_factor_ - 1)
      fail("lgconv: to_condensed requires all ", std::to_string(condense_factor_ - 1),
           " stages complete, have ", std::to_string(completed_stages_));
    const int per_group = out_ch_ / groups_;
    const int kept = in_ch_ / condense_factor_;
    CondensedLayer<T> c;
    c.groups = groups_;
    c.retained.resize(size_t(groups_));
    for (int g = 0; g < groups_; ++g)
      for (int i = 0; i < in_ch_; ++i)
        if ((*mask_)[size_t(g * per_group) * in_ch_ + i])
          c.retained[size_t(g)].push_back(i);
    for (const auto& r : c.retained)
      require(int(r.size()) == kept, "lgconv: inconsistent mask cardinality");
    c.packed_weight = Tensor<T>::zeros({out_ch_, kept, 1, 1});
    T* pw = c.packed_weight.data();
    const T* wp = weight_.data();
    for (int o = 0; o < out_ch_; ++o) {
      const auto& idx = c.retained[size_t(o / per_group)];
      for (int j = 0; j < kept; ++j) pw[int64_t(o) * kept + j] = wp[int64_t(o) * in_ch_ + idx[j]];
    }
    return c;
  }

  double active_fraction() const {
    int64_t on = 0;
    for (uint8_t m : *mask_) on += m;
    return double(on) / double(mask_->size());
  }

  void collect(Registry<T>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".weight", weight_);
    reg.masks.push_back({prefix + ".mask", mask_.get()});
    reg.counters.push_back({prefix + ".completed_stages",
                            [this] { return int64_t(completed_stages_); },
                            [this](int64_t v) { completed_stages_ = int(v); }});
  }

  Tensor<T>& weight() { return weight_; }
  const std::vector<uint8_t>& mask() const { return *mask_; }
  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }
  int groups() const { return groups_; }
  int condense_factor() const { return condense_factor_; }
  int completed_stages() const { return completed_stages_; }
  bool fully_condensed() const { return completed_stages_ == condense_factor_ - 1; }

 private:
  int in_ch_, out_ch_, groups_, condense_factor_;
  int completed_stages_ = 0;
  Tensor<T> weight_;
  std::shared_ptr<std::vector<uint8_t>> mask_;
};

}  // namespace cunet
