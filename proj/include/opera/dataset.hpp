// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "opera/embedding.hpp"
#include "opera/rng.hpp"
#include "opera/util.hpp"
#include "opera/vec.hpp"

namespace opera {

/// One labeled (query, document) pair. Grades follow the 1..4 relevance
/// scale; grade >= 3 defines the evaluation positives.
struct PairEntry {
  std::uint32_t query;
  std::uint32_t doc;
  int grade;
};

/// Queries, documents and graded positive pairs. Documents without any
/// positive entry act as the pure-negative corpus pool. Immutable after
/// construction for all consumers in this library.
class RetrievalDataset {
 public:
  std::uint32_t intern_query(const std::string& id) {
    auto [it, inserted] = query_index_.try_emplace(id, static_cast<std::uint32_t>(query_ids_.size()));
    if (inserted) {
      query_ids_.push_back(id);
      query_pairs_.emplace_back();
      query_docs_sorted_.emplace_back();
    }
    return it->second;
  }

  std::uint32_t intern_document(const std::string& id) {
    auto [it, inserted] = doc_index_.try_emplace(id, static_cast<std::uint32_t>(doc_ids_.size()));
    if (inserted) doc_ids_.push_back(id);
    return it->second;
  }

  // Appends a positive pair; the pair's stable index is its insertion order.
  void add_positive(std::uint32_t query, std::uint32_t doc, int grade) {
    if (query >= query_ids_.size()) throw std::out_of_range("add_positive: query index out of range");
    if (doc >= doc_ids_.size()) throw std::out_of_range("add_positive: doc index out of range");
    if (grade < 1 || grade > 4) {
      throw std::invalid_argument("relevance grade must be in 1..4, got " + std::to_string(grade));
    }
    if (is_positive(query, doc)) {
      throw std::invalid_argument("duplicate positive pair (" + query_ids_[query] + ", " +
                                  doc_ids_[doc] + ")");
    }
    auto pair_id = static_cast<std::uint32_t>(pairs_.size());
    pairs_.push_back({query, doc, grade});
    query_pairs_[query].push_back(pair_id);
    auto& docs = query_docs_sorted_[query];
    docs.insert(std::lower_bound(docs.begin(), docs.end(), doc), doc);
  }

  std::size_t n_queries() const { return query_ids_.size(); }
  std::size_t n_docs() const { return doc_ids_.size(); }
  std::size_t n_pairs() const { return pairs_.size(); }

  const std::string& query_id(std::size_t i) const { return query_ids_[i]; }
  const std::string& doc_id(std::size_t i) const { return doc_ids_[i]; }

  const std::vector<PairEntry>& pairs() const { return pairs_; }
  const std::vector<std::uint32_t>& query_pairs(std::size_t q) const { return query_pairs_[q]; }
  std::size_t m_q(std::size_t q) const { return query_pairs_[q].size(); }

  bool is_positive(std::uint32_t query, std::uint32_t doc) const {
    if (query >= query_docs_sorted_.size()) return false;
    const auto& docs = query_docs_sorted_[query];
    return std::binary_search(docs.begin(), docs.end(), doc);
  }

  const std::vector<std::uint32_t>& positive_docs_sorted(std::size_t q) const {
    return query_docs_sorted_[q];
  }

  // Per-query relevant document lists at the given grade threshold.
  std::vector<std::vector<std::uint32_t>> relevant_sets(int min_grade = 3) const {
    std::vector<std::vector<std::uint32_t>> rel(n_queries());
    for (const auto& p : pairs_) {
      if (p.grade >= min_grade) rel[p.query].push_back(p.doc);
    }
    for (auto& r : rel) std::sort(r.begin(), r.end());
    return rel;
  }

  static RetrievalDataset load_qrels(const std::filesystem::path& path);
  void save_qrels(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> query_ids_;
  std::vector<std::string> doc_ids_;
  std::vector<PairEntry> pairs_;
  std::vector<std::vector<std::uint32_t>> query_pairs_;        // pair ids, insertion order
  std::vector<std::vector<std::uint32_t>> query_docs_sorted_;  // doc ids, sorted
  std::unordered_map<std::string, std::uint32_t> query_index_;
  std::unordered_map<std::string, std::uint32_t> doc_index_;
};

inline RetrievalDataset RetrievalDataset::load_qrels(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open qrels file: " + path.string());
  RetrievalDataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t t1 = line.find('\t');
    if (t1 == std::string::npos || t1 == 0) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": expected `query_id<TAB>doc_id[<TAB>relevance]`");
    }
    std::size_t t2 = line.find('\t', t1 + 1);
    std::string qid = line.substr(0, t1);
    std::string did = t2 == std::string::npos ? line.substr(t1 + 1) : line.substr(t1 + 1, t2 - t1 - 1);
    if (did.empty()) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": empty doc id");
    }
    int grade = 4;
    if (t2 != std::string::npos) {
      std::string g = line.substr(t2 + 1);
      try {
        std::size_t used = 0;
        grade = std::stoi(g, &used);
        if (used != g.size()) throw std::invalid_argument(g);
      } catch (const std::exception&) {
        throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                 ": relevance is not an integer: `" + g + "`");
      }
    }
    std::uint32_t q = ds.intern_query(qid);
    std::uint32_t d = ds.intern_document(did);
    try {
      ds.add_positive(q, d, grade);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return ds;
}

inline void RetrievalDataset::save_qrels(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  for (const auto& p : pairs_) {
    os << query_ids_[p.query] << '\t' << doc_ids_[p.doc] << '\t' << p.grade << '\n';
  }
  if (!os) throw std::runtime_error("short write: " + path.string());
}

/// A subset of a dataset's positive pairs used for one training run. Keeps
/// base indices intact so embedding rows stay valid; samplers address pairs
/// by flat position within the view.
struct TrainingView {
  const RetrievalDataset* base = nullptr;
  std::vector<std::uint32_t> queries;                         // base query ids
  std::vector<std::vector<std::uint32_t>> query_pair_pos;     // per view query -> flat positions
  std::vector<std::uint32_t> flat_pairs;                      // base pair ids, ascending
  std::vector<std::uint32_t> flat_owner;                      // per flat position -> view query

  std::size_t n_queries() const { return queries.size(); }
  std::size_t n_pairs() const { return flat_pairs.size(); }
  const PairEntry& pair(std::size_t flat) const { return base->pairs()[flat_pairs[flat]]; }
};

// Training view at a grade threshold: includes every positive with
// grade >= min_grade; queries left with no pair are dropped. The evaluation
// view is untouched (grade >= 3 stays the relevance criterion).
inline TrainingView make_training_view(const RetrievalDataset& ds, int min_grade) {
  if (min_grade < 1 || min_grade > 4) {
    throw std::invalid_argument("min_grade must be in 1..4, got " + std::to_string(min_grade));
  }
  TrainingView view;
  view.base = &ds;
  for (std::uint32_t q = 0; q < ds.n_queries(); ++q) {
    std::vector<std::uint32_t> positions;
    for (std::uint32_t pid : ds.query_pairs(q)) {
      if (ds.pairs()[pid].grade >= min_grade) {
        positions.push_back(static_cast<std::uint32_t>(view.flat_pairs.size()));
        view.flat_pairs.push_back(pid);
      }
    }
    if (!positions.empty()) {
      view.flat_owner.insert(view.flat_owner.end(), positions.size(),
                             static_cast<std::uint32_t>(view.queries.size()));
      view.queries.push_back(q);
      view.query_pair_pos.push_back(std::move(positions));
    }
  }
  return view;
}

// Restricts a view to the pairs flagged kept (indexed by the view's flat
// positions). Queries losing all pairs are dropped with a warning.
inline TrainingView restrict_view(const TrainingView& view, const std::vector<std::uint8_t>& kept) {
  if (kept.size() != view.n_pairs()) {
    throw std::invalid_argument("kept-flag vector does not match view pair count");
  }
  TrainingView out;
  out.base = view.base;
  std::size_t dropped_queries = 0;
  for (std::size_t vq = 0; vq < view.n_queries(); ++vq) {
    std::vector<std::uint32_t> positions;
    for (std::uint32_t flat : view.query_pair_pos[vq]) {
      if (!kept[flat]) continue;
      positions.push_back(static_cast<std::uint32_t>(out.flat_pairs.size()));
      out.flat_pairs.push_back(view.flat_pairs[flat]);
    }
    if (positions.empty()) {
      ++dropped_queries;
      continue;
    }
    out.flat_owner.insert(out.flat_owner.end(), positions.size(),
                          static_cast<std::uint32_t>(out.queries.size()));
    out.queries.push_back(view.queries[vq]);
    out.query_pair_pos.push_back(std::move(positions));
  }
  if (out.flat_pairs.empty()) throw std::runtime_error("restriction removed every pair");
  if (dropped_queries > 0) {
    warn("pruning removed every pair of " + std::to_string(dropped_queries) +
         " queries; proceeding with the remaining " + std::to_string(out.queries.size()));
  }
  return out;
}

/// Configuration of the synthetic retrieval world. Per query, a private pair
/// of unit mean directions is drawn: correctly labeled documents scatter
/// around the first, false positives around the second, and the pure-negative
/// pool is isotropic. cluster_spread and query_perturbation are per-coordinate
/// standard deviations of the Gaussian offsets before re-normalization.
struct SyntheticWorldConfig {
  std::size_t dim = 32;
  std::size_t n_queries = 64;
  std::size_t docs_per_query = 8;
  double noise_rate = 0.0;  // fraction of false positives per query, in [0,1)
  std::size_t n_random_negatives = 0;
  double cluster_spread = 0.05;
  double query_perturbation = 0.12;  // initial signal strength of query rows
  double mean_inner_product = 0.0;   // <mu1, mu2>; 0 = orthogonal (default)
  std::uint64_t seed = 1;

  void validate() const {
    if (dim < 2) throw std::invalid_argument("synthetic dim must be >= 2");
    if (n_queries < 1) throw std::invalid_argument("need at least one query");
    if (docs_per_query < 1) throw std::invalid_argument("need at least one doc per query");
    if (!(noise_rate >= 0.0 && noise_rate < 1.0)) {
      throw std::invalid_argument("noise_rate must be in [0,1)");
    }
    if (cluster_spread < 0.0) throw std::invalid_argument("cluster_spread must be >= 0");
    if (query_perturbation < 0.0) throw std::invalid_argument("query_perturbation must be >= 0");
    if (!(mean_inner_product > -1.0 && mean_inner_product < 1.0)) {
      throw std::invalid_argument("mean_inner_product must be in (-1,1)");
    }
  }
};

struct SyntheticWorld {
  RetrievalDataset dataset;
  EmbeddingTable query_embeddings;
  EmbeddingTable doc_embeddings;
  // Per-query mean directions, retained for diagnostics.
  std::vector<std::vector<double>> mu1;
  std::vector<std::vector<double>> mu2;
};

namespace detail {

inline std::vector<double> random_unit(std::size_t dim, Rng& rng) {
  std::vector<double> v(dim);
  for (double& x : v) x = rng.normal();
  normalize(v);
  return v;
}

inline std::string format_id(const char* prefix, std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%s%06zu", prefix, i);
  return buf;
}

}  // namespace detail

inline SyntheticWorld generate_synthetic(const SyntheticWorldConfig& cfg) {
  cfg.validate();
  auto n_noisy = static_cast<std::size_t>(std::lround(cfg.noise_rate * static_cast<double>(cfg.docs_per_query)));
  if (n_noisy >= cfg.docs_per_query) {
    throw std::invalid_argument("noise_rate rounds to all-noisy queries; every query must keep >= 1 true positive");
  }
  SyntheticWorld world;
  std::size_t n_docs = cfg.n_queries * cfg.docs_per_query + cfg.n_random_negatives;
  world.query_embeddings = EmbeddingTable(cfg.n_queries, cfg.dim);
  world.doc_embeddings = EmbeddingTable(n_docs, cfg.dim);
  world.mu1.reserve(cfg.n_queries);
  world.mu2.reserve(cfg.n_queries);

  Rng rng(derive_seed(cfg.seed, "synthetic-world"));
  double c = cfg.mean_inner_product;
  double s = std::sqrt(1.0 - c * c);

  std::size_t doc_row = 0;
  for (std::size_t q = 0; q < cfg.n_queries; ++q) {
    std::vector<double> mu1 = detail::random_unit(cfg.dim, rng);
    // mu2: prescribed inner product with mu1.
    std::vector<double> w = detail::random_unit(cfg.dim, rng);
    double proj = dot(w, mu1);
    axpy(-proj, mu1, w);
    normalize(w);
    std::vector<double> mu2(cfg.dim);
    for (std::size_t i = 0; i < cfg.dim; ++i) mu2[i] = c * mu1[i] + s * w[i];

    world.dataset.intern_query(detail::format_id("q", q));
    auto qrow = world.query_embeddings.row(q);
    for (std::size_t i = 0; i < cfg.dim; ++i) {
      qrow[i] = mu1[i] + cfg.query_perturbation * rng.normal();
    }
    normalize(qrow);

    std::size_t n_true = cfg.docs_per_query - n_noisy;
    for (std::size_t d = 0; d < cfg.docs_per_query; ++d) {
      bool noisy = d >= n_true;
      const auto& mean = noisy ? mu2 : mu1;
      auto drow = world.doc_embeddings.row(doc_row);
      for (std::size_t i = 0; i < cfg.dim; ++i) {
        drow[i] = mean[i] + cfg.cluster_spread * rng.normal();
      }
      normalize(drow);
      std::uint32_t did = world.dataset.intern_document(detail::format_id("d", doc_row));
      world.dataset.add_positive(static_cast<std::uint32_t>(q), did, noisy ? 2 : 4);
      ++doc_row;
    }
    world.mu1.push_back(std::move(mu1));
    world.mu2.push_back(std::move(mu2));
  }
  // Pure-negative corpus pool: isotropic unit vectors, registered as
  // documents with no positive entry.
  for (std::size_t k = 0; k < cfg.n_random_negatives; ++k) {
    auto drow = world.doc_embeddings.row(doc_row);
    for (std::size_t i = 0; i < cfg.dim; ++i) drow[i] = rng.normal();
    normalize(drow);
    world.dataset.intern_document(detail::format_id("d", doc_row));
    ++doc_row;
  }
  return world;
}

// Validates that embedding tables can serve a dataset: one row per query,
// and a document corpus at least as large as the labeled document set
// (extra rows are unlabeled corpus negatives).
inline void check_binding(const RetrievalDataset& ds, const EmbeddingTable& queries,
                          const EmbeddingTable& docs) {
  if (queries.count() != ds.n_queries()) {
    throw std::invalid_argument("query table has " + std::to_string(queries.count()) +
                                " rows but dataset has " + std::to_string(ds.n_queries()) +
                                " queries");
  }
  if (docs.count() < ds.n_docs()) {
    throw std::invalid_argument("doc table has " + std::to_string(docs.count()) +
                                " rows but dataset references " + std::to_string(ds.n_docs()) +
                                " documents");
  }
  if (queries.count() > 0 && docs.count() > 0 && queries.dim() != docs.dim()) {
    throw std::invalid_argument("query/doc embedding dimensions differ");
  }
}

}  // namespace opera
