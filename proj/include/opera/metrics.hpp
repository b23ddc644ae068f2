// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "opera/dataset.hpp"
#include "opera/embedding.hpp"
#include "opera/util.hpp"
#include "opera/vec.hpp"

namespace opera {

// Full-corpus ranking by descending cosine similarity; ties break by
// ascending document index.
inline std::vector<std::uint32_t> rank_corpus(std::span<const double> query_embedding,
                                              const EmbeddingTable& docs) {
  if (docs.count() == 0) throw std::invalid_argument("rank_corpus: empty corpus");
  std::vector<double> scores(docs.count());
  for (std::uint32_t d = 0; d < docs.count(); ++d) {
    scores[d] = dot(query_embedding, docs.row(d));
  }
  std::vector<std::uint32_t> order(docs.count());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return order;
}

namespace detail {

inline bool contains_sorted(const std::vector<std::uint32_t>& sorted, std::uint32_t v) {
  return std::binary_search(sorted.begin(), sorted.end(), v);
}

inline void require_metric_args(const std::vector<std::uint32_t>& relevant, std::size_t k) {
  if (k < 1) throw std::invalid_argument("cutoff k must be >= 1");
  if (relevant.empty()) {
    throw std::invalid_argument("metric undefined for a query with no relevant documents");
  }
}

}  // namespace detail

// Binary-gain NDCG with log2 discounting: DCG sums 1/log2(rank+1) over
// relevant documents in the top k; the normalizer is the ideal DCG at k.
inline double ndcg_at_k(std::span<const std::uint32_t> ranking,
                        const std::vector<std::uint32_t>& relevant, std::size_t k) {
  detail::require_metric_args(relevant, k);
  std::size_t depth = std::min(k, ranking.size());
  double dcg = 0.0;
  for (std::size_t i = 0; i < depth; ++i) {
    if (detail::contains_sorted(relevant, ranking[i])) {
      dcg += 1.0 / std::log2(static_cast<double>(i + 2));
    }
  }
  double idcg = 0.0;
  std::size_t ideal = std::min(k, relevant.size());
  for (std::size_t i = 0; i < ideal; ++i) {
    idcg += 1.0 / std::log2(static_cast<double>(i + 2));
  }
  return dcg / idcg;
}

inline double recall_at_k(std::span<const std::uint32_t> ranking,
                          const std::vector<std::uint32_t>& relevant, std::size_t k) {
  detail::require_metric_args(relevant, k);
  std::size_t depth = std::min(k, ranking.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < depth; ++i) {
    if (detail::contains_sorted(relevant, ranking[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

inline double success_at_k(std::span<const std::uint32_t> ranking,
                           const std::vector<std::uint32_t>& relevant, std::size_t k) {
  detail::require_metric_args(relevant, k);
  std::size_t depth = std::min(k, ranking.size());
  for (std::size_t i = 0; i < depth; ++i) {
    if (detail::contains_sorted(relevant, ranking[i])) return 1.0;
  }
  return 0.0;
}

inline double mrr_at_k(std::span<const std::uint32_t> ranking,
                       const std::vector<std::uint32_t>& relevant, std::size_t k) {
  detail::require_metric_args(relevant, k);
  std::size_t depth = std::min(k, ranking.size());
  for (std::size_t i = 0; i < depth; ++i) {
    if (detail::contains_sorted(relevant, ranking[i])) {
      return 1.0 / static_cast<double>(i + 1);
    }
  }
  return 0.0;
}

/// Mean retrieval metrics per cutoff over the evaluated queries. Queries
/// with an empty relevant set are dropped from the means and counted.
struct MetricsReport {
  std::vector<int> cutoffs;
  std::map<std::string, std::map<int, double>> values;  // metric -> cutoff -> mean
  std::size_t evaluated_queries = 0;
  std::size_t skipped_queries = 0;
  nlohmann::json metadata;

  double at(const std::string& metric, int k) const { return values.at(metric).at(k); }

  nlohmann::json to_json() const {
    nlohmann::json metrics = nlohmann::json::object();
    for (const auto& [name, per_k] : values) {
      nlohmann::json row = nlohmann::json::object();
      for (const auto& [k, v] : per_k) row[std::to_string(k)] = v;
      metrics[name] = row;
    }
    return nlohmann::json{{"cutoffs", cutoffs},
                          {"metrics", metrics},
                          {"evaluated_queries", evaluated_queries},
                          {"skipped_queries", skipped_queries},
                          {"metadata", metadata}};
  }

  std::string to_table() const {
    static const std::vector<std::pair<std::string, std::string>> kNames = {
        {"mrr", "MRR"}, {"ndcg", "NDCG"}, {"recall", "Recall"}, {"success", "Success"}};
    std::string out;
    char buf[64];
    for (const auto& [key, label] : kNames) {
      auto it = values.find(key);
      if (it == values.end()) continue;
      for (int k : cutoffs) {
        std::snprintf(buf, sizeof(buf), "%-12s %8.5f\n", (label + "@" + std::to_string(k)).c_str(),
                      it->second.at(k));
        out += buf;
      }
    }
    std::snprintf(buf, sizeof(buf), "queries: %zu evaluated, %zu skipped\n", evaluated_queries,
                  skipped_queries);
    out += buf;
    return out;
  }
};

inline const std::vector<int>& default_cutoffs() {
  static const std::vector<int> k = {1, 5, 10, 20, 50, 100};
  return k;
}

// Evaluates all four metrics over full-corpus rankings at every cutoff.
// Relevance is binary at the grade threshold (>= 3 by default).
inline MetricsReport evaluate_retrieval(const RetrievalDataset& ds, const EmbeddingTable& queries,
                                        const EmbeddingTable& docs,
                                        const std::vector<int>& cutoffs = default_cutoffs(),
                                        int eval_min_grade = 3, unsigned jobs = 1) {
  check_binding(ds, queries, docs);
  for (int k : cutoffs) {
    if (k < 1) throw std::invalid_argument("cutoff k must be >= 1");
  }
  auto relevant = ds.relevant_sets(eval_min_grade);

  const std::size_t n = ds.n_queries();
  const std::size_t n_metrics = 4 * cutoffs.size();
  std::vector<double> per_query(n * n_metrics, 0.0);
  std::vector<std::uint8_t> usable(n, 0);

  parallel_for(n, jobs, [&](std::size_t begin, std::size_t end) {
    for (std::size_t q = begin; q < end; ++q) {
      if (relevant[q].empty()) continue;
      usable[q] = 1;
      auto ranking = rank_corpus(queries.row(q), docs);
      double* row = per_query.data() + q * n_metrics;
      for (std::size_t c = 0; c < cutoffs.size(); ++c) {
        auto k = static_cast<std::size_t>(cutoffs[c]);
        row[4 * c + 0] = ndcg_at_k(ranking, relevant[q], k);
        row[4 * c + 1] = recall_at_k(ranking, relevant[q], k);
        row[4 * c + 2] = success_at_k(ranking, relevant[q], k);
        row[4 * c + 3] = mrr_at_k(ranking, relevant[q], k);
      }
    }
  });

  MetricsReport report;
  report.cutoffs = cutoffs;
  std::size_t evaluated = 0;
  std::vector<double> sums(n_metrics, 0.0);
  for (std::size_t q = 0; q < n; ++q) {
    if (!usable[q]) continue;
    ++evaluated;
    const double* row = per_query.data() + q * n_metrics;
    for (std::size_t i = 0; i < n_metrics; ++i) sums[i] += row[i];
  }
  report.evaluated_queries = evaluated;
  report.skipped_queries = n - evaluated;
  if (report.skipped_queries > 0) {
    warn(std::to_string(report.skipped_queries) +
         " queries had no relevant documents and were excluded from metric means");
  }
  static const char* kKeys[] = {"ndcg", "recall", "success", "mrr"};
  for (std::size_t c = 0; c < cutoffs.size(); ++c) {
    for (std::size_t m = 0; m < 4; ++m) {
      double mean = evaluated == 0 ? 0.0 : sums[4 * c + m] / static_cast<double>(evaluated);
      report.values[kKeys[m]][cutoffs[c]] = mean;
    }
  }
  return report;
}

}  // namespace opera
