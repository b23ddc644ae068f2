// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "opera/dataset.hpp"
#include "opera/encoder.hpp"
#include "opera/rng.hpp"
#include "opera/schedules.hpp"
#include "opera/util.hpp"

namespace opera {

/// Live sampler scores. Query scores are offset mean contrastive losses
/// (strictly positive); pair scores are the positive-pair cosines from the
/// most recent forward pass that touched them.
struct SamplerState {
  std::int64_t step = 0;
  std::vector<double> query_scores;  // per view query
  std::vector<double> pair_scores;   // per view flat pair
  double query_score_sum = 0.0;
  std::size_t n0 = 0;                // fixed virtual dataset size (DP only)
  std::int64_t last_query_refresh = -1;
  Rng rng;
};

inline SamplerState make_sampler_state(const TrainingView& view, std::uint64_t seed) {
  SamplerState state;
  state.query_scores.assign(view.n_queries(), 0.0);
  state.pair_scores.assign(view.n_pairs(), 0.0);
  state.rng = Rng(seed);
  return state;
}

/// Scores observed during one training step's forward pass.
struct StepObservation {
  std::vector<std::pair<std::uint32_t, double>> pair_scores;   // flat pair -> cosine
  std::vector<std::pair<std::uint32_t, double>> query_losses;  // view query -> mean loss
};

constexpr double kQueryScoreOffset = 1e-6;

// Applies one step's observations: pair scores update on every call (last
// write wins), query scores only when the step hits the update interval.
inline void update_scores(SamplerState& state, const StepObservation& obs,
                          std::int64_t update_interval) {
  if (update_interval < 1) throw std::invalid_argument("update interval must be >= 1");
  for (const auto& [flat, score] : obs.pair_scores) {
    if (!std::isfinite(score)) throw std::runtime_error("non-finite pair score");
    state.pair_scores.at(flat) = score;
  }
  if (state.step % update_interval == 0) {
    for (const auto& [vq, loss] : obs.query_losses) {
      if (!std::isfinite(loss)) throw std::runtime_error("non-finite query loss");
      double score = loss + kQueryScoreOffset;
      if (!(score > 0.0)) score = kQueryScoreOffset;
      state.query_score_sum += score - state.query_scores.at(vq);
      state.query_scores[vq] = score;
    }
    state.last_query_refresh = state.step;
  }
}

// Warmup scoring pass: pair scores from cosines under the initial
// embeddings, query scores from the mean InfoNCE loss of each query's pairs
// against one uniform random negative each.
inline void initialize_scores(SamplerState& state, const TrainingView& view,
                              const EmbeddingTable& queries, const EmbeddingTable& docs,
                              double temperature, std::uint64_t warmup_seed) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  const RetrievalDataset& ds = *view.base;
  state.query_score_sum = 0.0;
  for (std::size_t vq = 0; vq < view.n_queries(); ++vq) {
    double loss_sum = 0.0;
    for (std::uint32_t flat : view.query_pair_pos[vq]) {
      const auto& p = view.pair(flat);
      double s_pos = dot(queries.row(p.query), docs.row(p.doc));
      state.pair_scores[flat] = s_pos;
      Rng neg_rng(derive_seed(warmup_seed, "warmup-pair", view.flat_pairs[flat]));
      std::uint32_t neg = uniform_negative(ds, p.query, docs.count(), neg_rng);
      double s_neg = dot(queries.row(p.query), docs.row(neg));
      double d = (s_neg - s_pos) / temperature;
      loss_sum += d > 0.0 ? d + std::log1p(std::exp(-d)) : std::log1p(std::exp(d));
    }
    double score = loss_sum / static_cast<double>(view.query_pair_pos[vq].size()) + kQueryScoreOffset;
    if (!(score > 0.0)) score = kQueryScoreOffset;
    state.query_scores[vq] = score;
    state.query_score_sum += score;
  }
  state.last_query_refresh = -1;
}

/// One sampled (query, positive pair) with the loss rescale factor the
/// strategy assigns to it.
struct DrawnPair {
  std::uint32_t view_query = 0;
  std::uint32_t flat_pair = 0;
  double loss_scale = 1.0;
};

// Document-level soft pruning of Algorithm-style two-level sampling: the
// top lround(v*m) pairs of the query by current score get weight beta, the
// rest weight 1 (strictly greater than the threshold score counts as high,
// so boundary ties fall to the low side). Returns normalized probabilities
// in pair-position order.
inline std::vector<double> document_probabilities(const SamplerState& state,
                                                  const TrainingView& view, std::uint32_t vq,
                                                  double beta, double cutoff) {
  const auto& positions = view.query_pair_pos[vq];
  std::size_t m = positions.size();
  std::vector<double> w(m, 1.0);
  auto n_high = static_cast<std::size_t>(std::lround(cutoff * static_cast<double>(m)));
  n_high = std::min(n_high, m);
  if (n_high == m) {
    std::fill(w.begin(), w.end(), beta);
  } else if (n_high > 0) {
    std::vector<double> scratch(m);
    for (std::size_t i = 0; i < m; ++i) scratch[i] = state.pair_scores[positions[i]];
    std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(n_high),
                     scratch.end(), std::greater<>());
    double threshold = scratch[n_high];
    for (std::size_t i = 0; i < m; ++i) {
      if (state.pair_scores[positions[i]] > threshold) w[i] = beta;
    }
  }
  double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= total;
  return w;
}

// Samples one positive pair of the query with the soft-pruned weights at the
// schedules' current strengths. Every pair keeps strictly positive
// probability. Returns a flat pair position.
inline std::uint32_t sample_document(SamplerState& state, const TrainingView& view,
                                     std::uint32_t vq, const ScheduleParams& params, Rng& rng) {
  const auto& positions = view.query_pair_pos[vq];
  std::size_t m = positions.size();
  if (m == 1) return positions[0];
  double beta = cosine_schedule(params.beta_start, params.beta_end, state.step, params.t_max);
  double cutoff = cosine_schedule(params.cutoff_start, params.cutoff_end, state.step, params.t_max);

  auto n_high = static_cast<std::size_t>(std::lround(cutoff * static_cast<double>(m)));
  n_high = std::min(n_high, m);
  if (n_high == 0 || n_high == m || beta == 1.0) {
    return positions[rng.index(m)];  // weights collapse to uniform
  }
  std::vector<double> scratch(m);
  for (std::size_t i = 0; i < m; ++i) scratch[i] = state.pair_scores[positions[i]];
  std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(n_high),
                   scratch.end(), std::greater<>());
  double threshold = scratch[n_high];
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    total += state.pair_scores[positions[i]] > threshold ? beta : 1.0;
  }
  double x = rng.uniform() * total;
  double cum = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    cum += state.pair_scores[positions[i]] > threshold ? beta : 1.0;
    if (x < cum) return positions[i];
  }
  return positions[m - 1];
}

/// Batch-level sampling strategy interface. An instance is bound to one run
/// (single-threaded, owns per-run caches); draws and observations alternate
/// under the trainer's step loop.
class SamplingStrategy {
 public:
  virtual ~SamplingStrategy() = default;
  virtual std::string_view name() const = 0;
  virtual bool uses_scores() const { return false; }
  virtual void prepare(SamplerState& state, const TrainingView& view) {
    (void)state;
    (void)view;
  }
  // Appends up to batch_size draws; strategies with per-slot pruning may
  // emit fewer.
  virtual void draw(SamplerState& state, const TrainingView& view, std::size_t batch_size,
                    std::vector<DrawnPair>& out) = 0;
  virtual void observe(SamplerState& state, const TrainingView& view,
                       const StepObservation& obs) {
    (void)state;
    (void)view;
    (void)obs;
  }
  // Per-slot marginal probabilities at the state's current step, for traces.
  virtual double query_probability(const SamplerState& state, const TrainingView& view,
                                   std::uint32_t vq) const = 0;
  virtual double pair_probability(const SamplerState& state, const TrainingView& view,
                                  std::uint32_t flat) const = 0;
};

/// Standard finetuning: uniform queries, uniform positives.
class UniformStrategy : public SamplingStrategy {
 public:
  std::string_view name() const override { return "ft"; }

  void draw(SamplerState& state, const TrainingView& view, std::size_t batch_size,
            std::vector<DrawnPair>& out) override {
    for (std::size_t b = 0; b < batch_size; ++b) {
      auto vq = static_cast<std::uint32_t>(state.rng.index(view.n_queries()));
      const auto& positions = view.query_pair_pos[vq];
      out.push_back({vq, positions[state.rng.index(positions.size())], 1.0});
    }
  }

  double query_probability(const SamplerState&, const TrainingView& view,
                           std::uint32_t) const override {
    return 1.0 / static_cast<double>(view.n_queries());
  }
  double pair_probability(const SamplerState&, const TrainingView& view,
                          std::uint32_t flat) const override {
    std::uint32_t vq = view.flat_owner[flat];
    return 1.0 / (static_cast<double>(view.n_queries()) *
                  static_cast<double>(view.query_pair_pos[vq].size()));
  }
};

/// Sampling over a statically pruned set: uniform over the kept pairs, which
/// realizes P(q) proportional to the query's kept-pair count with uniform
/// P(d|q). Used for SP and RP over a restricted view.
class PairUniformStrategy : public SamplingStrategy {
 public:
  explicit PairUniformStrategy(std::string name = "sp") : name_(std::move(name)) {}
  std::string_view name() const override { return name_; }

  void draw(SamplerState& state, const TrainingView& view, std::size_t batch_size,
            std::vector<DrawnPair>& out) override {
    for (std::size_t b = 0; b < batch_size; ++b) {
      auto flat = static_cast<std::uint32_t>(state.rng.index(view.n_pairs()));
      out.push_back({view.flat_owner[flat], flat, 1.0});
    }
  }

  double query_probability(const SamplerState&, const TrainingView& view,
                           std::uint32_t vq) const override {
    return static_cast<double>(view.query_pair_pos[vq].size()) /
           static_cast<double>(view.n_pairs());
  }
  double pair_probability(const SamplerState&, const TrainingView& view,
                          std::uint32_t) const override {
    return 1.0 / static_cast<double>(view.n_pairs());
  }

 private:
  std::string name_;
};

/// Two-level dynamic pruning. Queries: the top lround(r(t)*n) by score join
/// n0 - |top| queries drawn uniformly from the remainder; the batch samples
/// uniformly with replacement from that union. The random part is redrawn on
/// every call; the score ordering is re-sorted only after a query-score
/// refresh, which is what the update interval amortizes.
class DynamicStrategy : public SamplingStrategy {
 public:
  explicit DynamicStrategy(ScheduleParams params) : params_(params) { params_.validate(); }

  std::string_view name() const override { return "dp"; }
  bool uses_scores() const override { return true; }
  const ScheduleParams& params() const { return params_; }

  void prepare(SamplerState& state, const TrainingView& view) override {
    state.n0 = virtual_size(view.n_queries(), params_.ratio_start, params_.alpha_start);
  }

  void draw(SamplerState& state, const TrainingView& view, std::size_t batch_size,
            std::vector<DrawnPair>& out) override {
    ensure_order(state, view);
    std::size_t n = view.n_queries();
    std::size_t top_count = current_top_count(state, n);
    std::size_t n_rand = state.n0 - top_count;

    rand_pool_.assign(order_.begin() + static_cast<std::ptrdiff_t>(top_count), order_.end());
    for (std::size_t i = 0; i < n_rand; ++i) {
      std::size_t j = i + state.rng.index(rand_pool_.size() - i);
      std::swap(rand_pool_[i], rand_pool_[j]);
    }
    for (std::size_t b = 0; b < batch_size; ++b) {
      std::size_t slot = state.rng.index(state.n0);
      std::uint32_t vq = slot < top_count ? order_[slot] : rand_pool_[slot - top_count];
      out.push_back({vq, sample_document(state, view, vq, params_, state.rng), 1.0});
    }
  }

  void observe(SamplerState& state, const TrainingView&, const StepObservation& obs) override {
    update_scores(state, obs, params_.update_interval);
  }

  double query_probability(const SamplerState& state, const TrainingView& view,
                           std::uint32_t vq) const override {
    ensure_order(state, view);
    std::size_t n = view.n_queries();
    std::size_t top_count = current_top_count(state, n);
    double inv_n0 = 1.0 / static_cast<double>(state.n0);
    if (pos_in_order_[vq] < top_count) return inv_n0;
    double n_rand = static_cast<double>(state.n0 - top_count);
    return n_rand / static_cast<double>(n - top_count) * inv_n0;
  }

  double pair_probability(const SamplerState& state, const TrainingView& view,
                          std::uint32_t flat) const override {
    std::uint32_t vq = view.flat_owner[flat];
    double beta = cosine_schedule(params_.beta_start, params_.beta_end, state.step, params_.t_max);
    double cutoff =
        cosine_schedule(params_.cutoff_start, params_.cutoff_end, state.step, params_.t_max);
    auto probs = document_probabilities(state, view, vq, beta, cutoff);
    const auto& positions = view.query_pair_pos[vq];
    std::size_t local = std::find(positions.begin(), positions.end(), flat) - positions.begin();
    return query_probability(state, view, vq) * probs[local];
  }

 private:
  // Number of top-score queries at the state's current step. When n0 < n at
  // least one slot is reserved for the random part so no query's probability
  // ever reaches zero.
  std::size_t current_top_count(const SamplerState& state, std::size_t n) const {
    double alpha =
        cosine_schedule(params_.alpha_start, params_.alpha_end, state.step, params_.t_max);
    double r = top_ratio(alpha, state.n0, n);
    auto top = static_cast<std::size_t>(std::lround(r * static_cast<double>(n)));
    top = std::min(top, state.n0);
    if (state.n0 < n && top == state.n0) top = state.n0 - 1;
    return top;
  }

  void ensure_order(const SamplerState& state, const TrainingView& view) const {
    if (cached_refresh_ == state.last_query_refresh && order_.size() == view.n_queries()) return;
    order_.resize(view.n_queries());
    std::iota(order_.begin(), order_.end(), 0u);
    std::stable_sort(order_.begin(), order_.end(), [&](std::uint32_t a, std::uint32_t b) {
      return state.query_scores[a] > state.query_scores[b];
    });
    pos_in_order_.resize(order_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) pos_in_order_[order_[i]] = i;
    cached_refresh_ = state.last_query_refresh;
  }

  ScheduleParams params_;
  mutable std::vector<std::uint32_t> order_;         // view queries, score-descending
  mutable std::vector<std::size_t> pos_in_order_;
  mutable std::int64_t cached_refresh_ = -2;
  std::vector<std::uint32_t> rand_pool_;
};

/// Loss-mean baseline: below-mean queries are skipped with a fixed
/// probability and survivors carry an inverse rescale factor; pruning is
/// disabled for the final anneal_fraction of the run.
struct InfoBatchParams {
  double prune_prob = 0.5;
  double anneal_fraction = 0.125;
  std::int64_t t_max = 1;

  void validate() const {
    if (!(prune_prob >= 0.0 && prune_prob < 1.0)) {
      throw std::invalid_argument("prune probability must be in [0,1)");
    }
    if (!(anneal_fraction >= 0.0 && anneal_fraction <= 1.0)) {
      throw std::invalid_argument("anneal fraction must be in [0,1]");
    }
    if (t_max < 1) throw std::invalid_argument("t_max must be >= 1");
  }
};

class InfoBatchStrategy : public SamplingStrategy {
 public:
  explicit InfoBatchStrategy(InfoBatchParams params) : params_(params) { params_.validate(); }

  std::string_view name() const override { return "infobatch"; }
  bool uses_scores() const override { return true; }

  void draw(SamplerState& state, const TrainingView& view, std::size_t batch_size,
            std::vector<DrawnPair>& out) override {
    bool active = pruning_active(state);
    double mean = state.query_score_sum / static_cast<double>(view.n_queries());
    double rescale = 1.0 / (1.0 - params_.prune_prob);
    for (std::size_t b = 0; b < batch_size; ++b) {
      auto vq = static_cast<std::uint32_t>(state.rng.index(view.n_queries()));
      bool below = state.query_scores[vq] < mean;
      if (active && below && state.rng.bernoulli(params_.prune_prob)) continue;  // slot skipped
      const auto& positions = view.query_pair_pos[vq];
      double scale = active && below ? rescale : 1.0;
      out.push_back({vq, positions[state.rng.index(positions.size())], scale});
    }
  }

  void observe(SamplerState& state, const TrainingView&, const StepObservation& obs) override {
    update_scores(state, obs, 1);
  }

  double query_probability(const SamplerState& state, const TrainingView& view,
                           std::uint32_t vq) const override {
    double p = 1.0 / static_cast<double>(view.n_queries());
    if (!pruning_active(state)) return p;
    double mean = state.query_score_sum / static_cast<double>(view.n_queries());
    return state.query_scores[vq] < mean ? p * (1.0 - params_.prune_prob) : p;
  }
  double pair_probability(const SamplerState& state, const TrainingView& view,
                          std::uint32_t flat) const override {
    std::uint32_t vq = view.flat_owner[flat];
    return query_probability(state, view, vq) /
           static_cast<double>(view.query_pair_pos[vq].size());
  }

 private:
  bool pruning_active(const SamplerState& state) const {
    double horizon = (1.0 - params_.anneal_fraction) * static_cast<double>(params_.t_max);
    return static_cast<double>(state.step) < horizon;
  }

  InfoBatchParams params_;
};

// ---------------------------------------------------------------------------
// Sampler state snapshots (versioned binary, includes the rng stream).

namespace detail {

constexpr char kSnapshotMagic[] = "OPSNAP1\n";
constexpr std::size_t kSnapshotMagicLen = 8;

inline void write_doubles(std::ostream& os, const std::vector<double>& v) {
  static_assert(sizeof(double) == 8);
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_doubles(std::istream& is, std::vector<double>& v) {
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
}

}  // namespace detail

inline void save_snapshot(const SamplerState& state, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os.write(detail::kSnapshotMagic, detail::kSnapshotMagicLen);
  std::ostringstream rng_text;
  state.rng.save(rng_text);
  nlohmann::json header = {{"version", 1},
                           {"step", state.step},
                           {"n0", state.n0},
                           {"last_query_refresh", state.last_query_refresh},
                           {"n_queries", state.query_scores.size()},
                           {"n_pairs", state.pair_scores.size()},
                           {"rng_bytes", rng_text.str().size()}};
  std::string line = header.dump();
  line.push_back('\n');
  os.write(line.data(), static_cast<std::streamsize>(line.size()));
  detail::write_doubles(os, state.query_scores);
  detail::write_doubles(os, state.pair_scores);
  const std::string rng_str = rng_text.str();
  os.write(rng_str.data(), static_cast<std::streamsize>(rng_str.size()));
  if (!os) throw std::runtime_error("short write: " + path.string());
}

inline SamplerState load_snapshot(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  char magic[detail::kSnapshotMagicLen];
  is.read(magic, detail::kSnapshotMagicLen);
  if (!is || std::memcmp(magic, detail::kSnapshotMagic, detail::kSnapshotMagicLen) != 0) {
    throw std::runtime_error("not a sampler snapshot (bad magic): " + path.string());
  }
  std::string header_line;
  if (!std::getline(is, header_line)) throw std::runtime_error("missing snapshot header");
  nlohmann::json header = nlohmann::json::parse(header_line);
  if (header.value("version", 0) != 1) {
    throw std::runtime_error("unsupported snapshot version in " + path.string());
  }
  SamplerState state;
  state.step = header["step"].get<std::int64_t>();
  state.n0 = header["n0"].get<std::size_t>();
  state.last_query_refresh = header["last_query_refresh"].get<std::int64_t>();
  state.query_scores.resize(header["n_queries"].get<std::size_t>());
  state.pair_scores.resize(header["n_pairs"].get<std::size_t>());
  detail::read_doubles(is, state.query_scores);
  detail::read_doubles(is, state.pair_scores);
  std::string rng_str(header["rng_bytes"].get<std::size_t>(), '\0');
  is.read(rng_str.data(), static_cast<std::streamsize>(rng_str.size()));
  if (!is) throw std::runtime_error("truncated snapshot: " + path.string());
  std::istringstream rng_text(rng_str);
  state.rng.load(rng_text);
  state.query_score_sum = std::accumulate(state.query_scores.begin(), state.query_scores.end(), 0.0);
  return state;
}

// ---------------------------------------------------------------------------
// Sampling-weight traces: one row per query and per pair at the traced step,
// with per-slot marginal probabilities. Indices are the base dataset's.

inline void write_trace_header(std::ostream& os) { os << "step,kind,index,probability\n"; }

inline void emit_trace(std::ostream& os, const SamplingStrategy& strategy,
                       const SamplerState& state, const TrainingView& view) {
  char buf[64];
  for (std::size_t vq = 0; vq < view.n_queries(); ++vq) {
    double p = strategy.query_probability(state, view, static_cast<std::uint32_t>(vq));
    std::snprintf(buf, sizeof(buf), "%.10g", p);
    os << state.step << ",query," << view.queries[vq] << ',' << buf << '\n';
  }
  for (std::size_t flat = 0; flat < view.n_pairs(); ++flat) {
    double p = strategy.pair_probability(state, view, static_cast<std::uint32_t>(flat));
    std::snprintf(buf, sizeof(buf), "%.10g", p);
    os << state.step << ",pair," << view.flat_pairs[flat] << ',' << buf << '\n';
  }
}

}  // namespace opera
