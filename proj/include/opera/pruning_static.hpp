// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "opera/dataset.hpp"
#include "opera/embedding.hpp"
#include "opera/rng.hpp"
#include "opera/vec.hpp"

namespace opera {

/// One finite score per positive pair of a training view, aligned with the
/// view's flat positions.
struct PairScoreTable {
  const TrainingView* view = nullptr;
  std::vector<double> scores;

  std::size_t size() const { return scores.size(); }
};

/// Kept/pruned indicator per pair of a view, with the realized retention.
struct PrunedView {
  const TrainingView* view = nullptr;
  std::vector<std::uint8_t> kept;             // per flat position
  std::vector<std::uint32_t> kept_per_query;  // per view query
  std::size_t kept_count = 0;
  double retention = 0.0;

  void save_csv(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    os << "pair_index,kept\n";
    for (std::size_t i = 0; i < kept.size(); ++i) {
      os << view->flat_pairs[i] << ',' << int(kept[i]) << '\n';
    }
  }
};

namespace detail {

inline PrunedView make_pruned(const TrainingView& view, std::vector<std::uint8_t> kept) {
  PrunedView out;
  out.view = &view;
  out.kept = std::move(kept);
  out.kept_per_query.assign(view.n_queries(), 0);
  for (std::size_t i = 0; i < out.kept.size(); ++i) {
    if (out.kept[i]) {
      ++out.kept_count;
      ++out.kept_per_query[view.flat_owner[i]];
    }
  }
  out.retention = view.n_pairs() == 0 ? 0.0
                                      : static_cast<double>(out.kept_count) /
                                            static_cast<double>(view.n_pairs());
  return out;
}

inline std::size_t retention_count(double k, std::size_t total) {
  if (!(k > 0.0 && k <= 1.0)) throw std::invalid_argument("retention rate must be in (0,1]");
  return static_cast<std::size_t>(std::lround(k * static_cast<double>(total)));
}

}  // namespace detail

// Cosine similarity of every positive pair under the given embeddings.
inline PairScoreTable score_pairs(const TrainingView& view, const EmbeddingTable& queries,
                                  const EmbeddingTable& docs) {
  check_binding(*view.base, queries, docs);
  PairScoreTable table;
  table.view = &view;
  table.scores.resize(view.n_pairs());
  for (std::size_t i = 0; i < view.n_pairs(); ++i) {
    const auto& p = view.pair(i);
    table.scores[i] = dot(queries.row(p.query), docs.row(p.doc));
  }
  return table;
}

// Keeps the top round(k * total) pairs by score. Ties resolve in favor of
// the lower stable pair index, which makes the kept set deterministic.
inline PrunedView static_prune(const PairScoreTable& table, double k) {
  if (table.view == nullptr || table.size() == 0) {
    throw std::invalid_argument("static_prune: empty score table");
  }
  std::size_t keep = detail::retention_count(k, table.size());
  std::vector<std::uint32_t> order(table.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (table.scores[a] != table.scores[b]) return table.scores[a] > table.scores[b];
    return table.view->flat_pairs[a] < table.view->flat_pairs[b];
  });
  std::vector<std::uint8_t> kept(table.size(), 0);
  for (std::size_t i = 0; i < keep; ++i) kept[order[i]] = 1;
  return detail::make_pruned(*table.view, std::move(kept));
}

// Uniformly random retention of round(k * total) pairs.
inline PrunedView random_prune(const TrainingView& view, double k, Rng& rng) {
  std::size_t keep = detail::retention_count(k, view.n_pairs());
  std::vector<std::uint32_t> order(view.n_pairs());
  std::iota(order.begin(), order.end(), 0u);
  for (std::size_t i = 0; i < keep; ++i) {
    std::size_t j = i + rng.index(order.size() - i);
    std::swap(order[i], order[j]);
  }
  std::vector<std::uint8_t> kept(view.n_pairs(), 0);
  for (std::size_t i = 0; i < keep; ++i) kept[order[i]] = 1;
  return detail::make_pruned(view, std::move(kept));
}

// Consistency-based scoring: each pair is ranked against negatives drawn
// (without replacement) from the positive documents of other queries; the
// score is the reciprocal rank of the positive, with rank ties resolved in
// the positive's favor. Draws use per-pair streams derived from one base
// value, so scores are independent of evaluation order.
inline PairScoreTable cbs_score(const TrainingView& view, const EmbeddingTable& queries,
                                const EmbeddingTable& docs, std::size_t n_negatives, Rng& rng) {
  if (n_negatives < 1) throw std::invalid_argument("cbs_score: n_negatives must be >= 1");
  check_binding(*view.base, queries, docs);
  const RetrievalDataset& ds = *view.base;

  // All docs that are a positive of at least one query, deduplicated.
  std::vector<std::uint32_t> all_positive_docs;
  for (const auto& p : ds.pairs()) all_positive_docs.push_back(p.doc);
  std::sort(all_positive_docs.begin(), all_positive_docs.end());
  all_positive_docs.erase(std::unique(all_positive_docs.begin(), all_positive_docs.end()),
                          all_positive_docs.end());

  std::uint64_t base_seed = rng.next();
  PairScoreTable table;
  table.view = &view;
  table.scores.resize(view.n_pairs());

  std::vector<std::uint32_t> pool;
  for (std::size_t i = 0; i < view.n_pairs(); ++i) {
    const auto& p = view.pair(i);
    pool.clear();
    const auto& own = ds.positive_docs_sorted(p.query);
    std::set_difference(all_positive_docs.begin(), all_positive_docs.end(), own.begin(),
                        own.end(), std::back_inserter(pool));
    if (pool.empty()) {
      throw std::runtime_error("cbs_score: query " + ds.query_id(p.query) +
                               " owns every positive document");
    }
    std::size_t draws = std::min(n_negatives, pool.size());
    Rng pair_rng(derive_seed(base_seed, "cbs-pair", view.flat_pairs[i]));
    auto q = queries.row(p.query);
    double own_score = dot(q, docs.row(p.doc));
    std::size_t beaten_by = 0;
    for (std::size_t j = 0; j < draws; ++j) {
      std::size_t pick = j + pair_rng.index(pool.size() - j);
      std::swap(pool[j], pool[pick]);
      if (dot(q, docs.row(pool[j])) > own_score) ++beaten_by;
    }
    table.scores[i] = 1.0 / static_cast<double>(1 + beaten_by);
  }
  return table;
}

}  // namespace opera
