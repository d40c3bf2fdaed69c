#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prompthash/hashing.hpp"
#include "prompthash/tensor.hpp"

// Hamming-space ranking and evaluation: mAP@all with deterministic
// tie-breaking plus radius-parameterized precision-recall curves.

namespace prompthash {

// Distance between row i of a and row j of b; codes stay unpacked here.
std::size_t hamming_rows(const CodeMatrix& a, std::size_t i, const CodeMatrix& b, std::size_t j);

struct MapResult {
  double map = 0.0;
  std::vector<double> per_query_ap;  // one entry per scored query, in query order
  std::vector<std::size_t> scored_queries;  // query indices with at least one relevant item
  std::size_t excluded = 0;                 // queries with no relevant database item
};

// Rank by ascending Hamming distance, ties broken by ascending database
// index; AP over the full ranking with R = all relevant items. Queries with
// zero relevant items are excluded from the mean and counted.
MapResult map_at_all(const CodeMatrix& queries, const CodeMatrix& database,
                     const Tensor<float>& relevance);

struct PrPoint {
  std::size_t radius = 0;
  double precision = 0.0;
  double recall = 0.0;

  bool operator==(const PrPoint&) const = default;
};

// One point per radius r in {0..K}: precision and recall of {d <= r},
// micro-averaged over queries. Empty retrieval counts as precision 1.
std::vector<PrPoint> pr_curve(const CodeMatrix& queries, const CodeMatrix& database,
                              const Tensor<float>& relevance);

// {direction, K, mAP, per_query_ap, pr_points} as a JSON document.
std::string metrics_to_json(const std::string& direction, std::size_t k, const MapResult& map,
                            const std::vector<PrPoint>& pr);

// radius,precision,recall rows.
std::string pr_to_csv(const std::vector<PrPoint>& pr);

}  // namespace prompthash
