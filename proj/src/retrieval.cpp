#include "prompthash/retrieval.hpp"

#include <sstream>

#include "json.hpp"

namespace prompthash {

std::size_t hamming_rows(const CodeMatrix& a, std::size_t i, const CodeMatrix& b, std::size_t j) {
  if (a.k != b.k) throw ShapeError("hamming_rows: code length mismatch");
  const std::int8_t* ra = a.rows.data() + i * a.k;
  const std::int8_t* rb = b.rows.data() + j * b.k;
  std::size_t d = 0;
  for (std::size_t t = 0; t < a.k; ++t) d += ra[t] != rb[t];
  return d;
}

namespace {

void check_task(const CodeMatrix& queries, const CodeMatrix& database,
                const Tensor<float>& relevance) {
  if (database.count() == 0) throw ContractError("retrieval: empty database");
  if (queries.k != database.k) throw ShapeError("retrieval: code length mismatch");
  if (relevance.rank() != 2 || relevance.dim(0) != queries.count() ||
      relevance.dim(1) != database.count()) {
    throw ShapeError("retrieval: relevance shape mismatch");
  }
}

// db indices bucketed by distance; concatenating buckets in radius order
// yields the ranking with ascending-index tie-breaks for free
std::vector<std::vector<std::size_t>> distance_buckets(const CodeMatrix& queries, std::size_t qi,
                                                       const CodeMatrix& database) {
  std::vector<std::vector<std::size_t>> buckets(queries.k + 1);
  for (std::size_t j = 0; j < database.count(); ++j) {
    buckets[hamming_rows(queries, qi, database, j)].push_back(j);
  }
  return buckets;
}

}  // namespace

MapResult map_at_all(const CodeMatrix& queries, const CodeMatrix& database,
                     const Tensor<float>& relevance) {
  check_task(queries, database, relevance);
  MapResult out;
  const std::size_t n = database.count();
  for (std::size_t qi = 0; qi < queries.count(); ++qi) {
    std::size_t r_total = 0;
    for (std::size_t j = 0; j < n; ++j) r_total += relevance.at2(qi, j) != 0.0f;
    if (r_total == 0) {
      ++out.excluded;
      continue;
    }
    const auto buckets = distance_buckets(queries, qi, database);
    std::size_t rank = 0, hits = 0;
    double ap = 0.0;
    for (const auto& bucket : buckets) {
      for (std::size_t j : bucket) {
        ++rank;
        if (relevance.at2(qi, j) != 0.0f) {
          ++hits;
          ap += double(hits) / double(rank);
        }
      }
    }
    ap /= double(r_total);
    out.per_query_ap.push_back(ap);
    out.scored_queries.push_back(qi);
    out.map += ap;
  }
  if (!out.per_query_ap.empty()) out.map /= double(out.per_query_ap.size());
  return out;
}

std::vector<PrPoint> pr_curve(const CodeMatrix& queries, const CodeMatrix& database,
                              const Tensor<float>& relevance) {
  check_task(queries, database, relevance);
  const std::size_t k = queries.k;
  // per-radius retrieved/relevant-retrieved counts pooled over queries
  std::vector<std::size_t> retrieved(k + 1, 0), hit(k + 1, 0);
  std::size_t total_relevant = 0;
  for (std::size_t qi = 0; qi < queries.count(); ++qi) {
    const auto buckets = distance_buckets(queries, qi, database);
    for (std::size_t r = 0; r <= k; ++r) {
      for (std::size_t j : buckets[r]) {
        retrieved[r] += 1;
        hit[r] += relevance.at2(qi, j) != 0.0f;
        total_relevant += relevance.at2(qi, j) != 0.0f;
      }
    }
  }
  std::vector<PrPoint> out(k + 1);
  std::size_t ret_cum = 0, hit_cum = 0;
  for (std::size_t r = 0; r <= k; ++r) {
    ret_cum += retrieved[r];
    hit_cum += hit[r];
    out[r].radius = r;
    out[r].precision = ret_cum == 0 ? 1.0 : double(hit_cum) / double(ret_cum);
    out[r].recall = total_relevant == 0 ? 1.0 : double(hit_cum) / double(total_relevant);
  }
  return out;
}

std::string metrics_to_json(const std::string& direction, std::size_t k, const MapResult& map,
                            const std::vector<PrPoint>& pr) {
  nlohmann::json j;
  j["direction"] = direction;
  j["K"] = k;
  j["mAP"] = map.map;
  j["excluded_queries"] = map.excluded;
  j["per_query_ap"] = map.per_query_ap;
  j["scored_queries"] = map.scored_queries;
  nlohmann::json points = nlohmann::json::array();
  for (const PrPoint& p : pr) {
    points.push_back({{"radius", p.radius}, {"precision", p.precision}, {"recall", p.recall}});
  }
  j["pr_points"] = points;
  return j.dump(2);
}

std::string pr_to_csv(const std::vector<PrPoint>& pr) {
  std::ostringstream out;
  out << "radius,precision,recall\n";
  out.precision(17);
  for (const PrPoint& p : pr) out << p.radius << "," << p.precision << "," << p.recall << "\n";
  return out.str();
}

}  // namespace prompthash
