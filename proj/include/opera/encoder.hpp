// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "opera/dataset.hpp"
#include "opera/embedding.hpp"
#include "opera/rng.hpp"
#include "opera/util.hpp"
#include "opera/vec.hpp"

namespace opera {

/// One contrastive training item: a query, its sampled positive and the
/// negative candidates it is contrasted against.
struct TrainingTriple {
  std::uint32_t query = 0;
  std::uint32_t positive = 0;
  std::vector<std::uint32_t> negatives;
  double loss_scale = 1.0;
};

struct ContrastiveBatch {
  std::vector<TrainingTriple> items;
};

/// Sparse per-row gradient accumulator for the two tables.
struct GradientSet {
  std::vector<std::pair<std::uint32_t, std::vector<double>>> query_grads;
  std::vector<std::pair<std::uint32_t, std::vector<double>>> doc_grads;
};

struct LossResult {
  double mean_loss = 0.0;                 // scale-weighted mean over the batch
  std::vector<double> item_losses;        // unscaled per-item losses
  std::vector<double> positive_cosines;   // s(q, d+) per item, from the forward pass
  GradientSet grads;
};

namespace detail {

class GradAccumulator {
 public:
  explicit GradAccumulator(std::size_t dim) : dim_(dim) {}

  std::span<double> slot(std::uint32_t row,
                         std::vector<std::pair<std::uint32_t, std::vector<double>>>& grads,
                         std::unordered_map<std::uint32_t, std::size_t>& where) {
    auto [it, inserted] = where.try_emplace(row, grads.size());
    if (inserted) grads.emplace_back(row, std::vector<double>(dim_, 0.0));
    return grads[it->second].second;
  }

  std::span<double> query(std::uint32_t row, GradientSet& g) { return slot(row, g.query_grads, qwhere_); }
  std::span<double> doc(std::uint32_t row, GradientSet& g) { return slot(row, g.doc_grads, dwhere_); }

 private:
  std::size_t dim_;
  std::unordered_map<std::uint32_t, std::size_t> qwhere_;
  std::unordered_map<std::uint32_t, std::size_t> dwhere_;
};

// Projects an accumulated gradient onto the tangent space of the unit sphere
// at e: g <- g - (g . e) e. This is the normalization Jacobian at unit norm,
// so the stored rows can be treated as raw parameters.
inline void project_tangent(std::span<double> g, std::span<const double> e) {
  double c = dot({g.data(), g.size()}, e);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] -= c * e[i];
}

}  // namespace detail

// Mean InfoNCE loss over the batch with analytic gradients with respect to
// the raw (pre-normalization) embedding rows. Candidates of an item are its
// positive plus its negatives; the loss is
//   -log( exp(s(q,d+)/tau) / sum_j exp(s(q,d_j)/tau) ).
inline LossResult info_nce(const ContrastiveBatch& batch, const EmbeddingTable& queries,
                           const EmbeddingTable& docs, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (batch.items.empty()) throw std::invalid_argument("empty contrastive batch");

  LossResult result;
  result.item_losses.reserve(batch.items.size());
  result.positive_cosines.reserve(batch.items.size());
  detail::GradAccumulator acc(queries.dim());

  double inv_b = 1.0 / static_cast<double>(batch.items.size());
  std::vector<double> logits;
  std::vector<double> softmax;
  double weighted_loss = 0.0;

  for (const auto& item : batch.items) {
    if (item.negatives.empty()) {
      throw std::invalid_argument("query has an empty negative candidate set");
    }
    for (std::uint32_t neg : item.negatives) {
      if (neg == item.positive) {
        throw std::logic_error("a query's own positive appeared among its negatives");
      }
    }
    auto q = queries.row(item.query);
    std::size_t n_cand = 1 + item.negatives.size();
    logits.resize(n_cand);
    logits[0] = dot(q, docs.row(item.positive)) / temperature;
    for (std::size_t j = 0; j < item.negatives.size(); ++j) {
      logits[j + 1] = dot(q, docs.row(item.negatives[j])) / temperature;
    }
    double zmax = *std::max_element(logits.begin(), logits.end());
    softmax.resize(n_cand);
    double sum = 0.0;
    for (std::size_t j = 0; j < n_cand; ++j) {
      softmax[j] = std::exp(logits[j] - zmax);
      sum += softmax[j];
    }
    double loss = std::log(sum) - (logits[0] - zmax);
    for (double& p : softmax) p /= sum;

    result.item_losses.push_back(loss);
    result.positive_cosines.push_back(logits[0] * temperature);
    weighted_loss += item.loss_scale * loss;

    double base = item.loss_scale * inv_b / temperature;
    auto gq = acc.query(item.query, result.grads);
    for (std::size_t j = 0; j < n_cand; ++j) {
      double coeff = (softmax[j] - (j == 0 ? 1.0 : 0.0)) * base;
      std::uint32_t drow = j == 0 ? item.positive : item.negatives[j - 1];
      axpy(coeff, docs.row(drow), gq);
      axpy(coeff, q, acc.doc(drow, result.grads));
    }
  }
  result.mean_loss = weighted_loss * inv_b;

  for (auto& [row, g] : result.grads.query_grads) detail::project_tangent(g, queries.row(row));
  for (auto& [row, g] : result.grads.doc_grads) detail::project_tangent(g, docs.row(row));
  return result;
}

// Plain SGD against the accumulated gradients, re-normalizing every touched
// row. Rows with an exactly zero gradient (and the lr = 0 case) are left
// bit-identical.
inline void sgd_step(EmbeddingTable& queries, EmbeddingTable& docs, const GradientSet& grads,
                     double learning_rate) {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be >= 0");
  if (learning_rate == 0.0) return;
  auto apply = [&](EmbeddingTable& table, const std::vector<std::pair<std::uint32_t, std::vector<double>>>& gs) {
    for (const auto& [row, g] : gs) {
      bool all_zero = true;
      for (double x : g) {
        if (!std::isfinite(x)) {
          throw std::runtime_error("non-finite gradient for row " + std::to_string(row));
        }
        if (x != 0.0) all_zero = false;
      }
      if (all_zero) continue;
      auto r = table.row(row);
      axpy(-learning_rate, g, r);
      normalize(r);
    }
  };
  apply(queries, grads.query_grads);
  apply(docs, grads.doc_grads);
}

// Ranks all non-positive documents of a query by descending cosine
// similarity (ties by ascending doc index) and returns the leading
// max_ranks of them.
inline std::vector<std::uint32_t> rank_negatives(const RetrievalDataset& ds, std::uint32_t query,
                                                 const EmbeddingTable& queries,
                                                 const EmbeddingTable& docs,
                                                 std::size_t max_ranks) {
  auto q = queries.row(query);
  std::vector<std::pair<double, std::uint32_t>> scored;
  scored.reserve(docs.count());
  for (std::uint32_t d = 0; d < docs.count(); ++d) {
    if (ds.is_positive(query, d)) continue;
    scored.emplace_back(dot(q, docs.row(d)), d);
  }
  auto better = [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  };
  std::size_t keep = std::min(max_ranks, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), better);
  std::vector<std::uint32_t> ranked(keep);
  for (std::size_t i = 0; i < keep; ++i) ranked[i] = scored[i].second;
  return ranked;
}

// Uniform random non-positive document.
inline std::uint32_t uniform_negative(const RetrievalDataset& ds, std::uint32_t query,
                                      std::size_t corpus_size, Rng& rng) {
  if (ds.positive_docs_sorted(query).size() >= corpus_size) {
    throw std::runtime_error("query " + ds.query_id(query) + " owns the entire corpus");
  }
  for (;;) {
    auto d = static_cast<std::uint32_t>(rng.index(corpus_size));
    if (!ds.is_positive(query, d)) return d;
  }
}

// One-shot hard-negative draw: uniform among rank positions [lo, hi]
// (1-based) of the query's non-positive ranking. Falls back to a uniform
// random negative when fewer than lo candidates exist.
inline std::uint32_t mine_hard_negative(const RetrievalDataset& ds, std::uint32_t query,
                                        const EmbeddingTable& queries, const EmbeddingTable& docs,
                                        std::uint32_t rank_lo, std::uint32_t rank_hi, Rng& rng,
                                        bool* fell_back = nullptr) {
  if (rank_lo < 1 || rank_lo > rank_hi || rank_hi > docs.count()) {
    throw std::invalid_argument("mining range must satisfy 1 <= lo <= hi <= corpus size");
  }
  auto ranked = rank_negatives(ds, query, queries, docs, rank_hi);
  if (ranked.size() < rank_lo) {
    warn("mining range starts past the candidate list of query " + ds.query_id(query) +
         "; falling back to a uniform negative");
    if (fell_back) *fell_back = true;
    return uniform_negative(ds, query, docs.count(), rng);
  }
  if (fell_back) *fell_back = false;
  std::size_t hi = std::min<std::size_t>(rank_hi, ranked.size());
  std::size_t pick = (rank_lo - 1) + rng.index(hi - rank_lo + 1);
  return ranked[pick];
}

/// Cached hard-negative miner. Rankings against the current embeddings are
/// recomputed lazily every refresh_every steps; per-step draws only index
/// into the cache.
class HardNegativeMiner {
 public:
  struct Config {
    std::uint32_t rank_lo = 1;
    std::uint32_t rank_hi = 100;
    std::int64_t refresh_every = 200;
  };

  HardNegativeMiner(const RetrievalDataset& ds, Config cfg) : ds_(&ds), cfg_(cfg) {
    if (cfg_.rank_lo < 1 || cfg_.rank_lo > cfg_.rank_hi) {
      throw std::invalid_argument("mining range must satisfy 1 <= lo <= hi");
    }
    if (cfg_.refresh_every < 1) throw std::invalid_argument("refresh cadence must be >= 1");
  }

  void maybe_refresh(std::int64_t step, const EmbeddingTable& queries, const EmbeddingTable& docs,
                     unsigned jobs = 1) {
    if (!ranked_.empty() && step % cfg_.refresh_every != 0) return;
    if (cfg_.rank_hi > docs.count()) {
      throw std::invalid_argument("mining range exceeds corpus size");
    }
    ranked_.resize(ds_->n_queries());
    parallel_for(ds_->n_queries(), jobs, [&](std::size_t begin, std::size_t end) {
      for (std::size_t q = begin; q < end; ++q) {
        ranked_[q] = rank_negatives(*ds_, static_cast<std::uint32_t>(q), queries, docs, cfg_.rank_hi);
      }
    });
  }

  std::uint32_t mine(std::uint32_t query, std::size_t corpus_size, Rng& rng) {
    const auto& ranked = ranked_.at(query);
    if (ranked.size() < cfg_.rank_lo) {
      if (fallbacks_++ == 0) {
        warn("hard-negative mining fell back to uniform negatives for query " + ds_->query_id(query));
      }
      return uniform_negative(*ds_, query, corpus_size, rng);
    }
    std::size_t hi = std::min<std::size_t>(cfg_.rank_hi, ranked.size());
    std::size_t pick = (cfg_.rank_lo - 1) + rng.index(hi - cfg_.rank_lo + 1);
    return ranked[pick];
  }

  std::size_t fallback_count() const { return fallbacks_; }

 private:
  const RetrievalDataset* ds_;
  Config cfg_;
  std::vector<std::vector<std::uint32_t>> ranked_;
  std::size_t fallbacks_ = 0;
};

}  // namespace opera
