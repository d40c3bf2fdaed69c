#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "prompthash/retrieval.hpp"
#include "prompthash/rng.hpp"

using namespace prompthash;

namespace {

CodeMatrix rand_codes(std::size_t n, std::size_t k, RngStream& rng) {
  CodeMatrix c;
  c.k = k;
  c.rows.resize(n * k);
  for (auto& v : c.rows) v = rng.uniform() < 0.5 ? -1 : 1;
  return c;
}

CodeMatrix from_rows(std::size_t k, std::vector<std::vector<int>> rows) {
  CodeMatrix c;
  c.k = k;
  for (const auto& r : rows) {
    for (int v : r) c.rows.push_back(std::int8_t(v));
  }
  return c;
}

// independent ranking oracle: full sort on (distance, index) pairs with its
// own scalar distance loop
double oracle_ap(const CodeMatrix& q, std::size_t qi, const CodeMatrix& db,
                 const Tensor<float>& rel) {
  std::vector<std::pair<std::size_t, std::size_t>> order;
  for (std::size_t j = 0; j < db.count(); ++j) {
    std::size_t d = 0;
    for (std::size_t t = 0; t < q.k; ++t) {
      d += q.rows[qi * q.k + t] != db.rows[j * db.k + t];
    }
    order.push_back({d, j});
  }
  std::sort(order.begin(), order.end());
  std::size_t r_total = 0;
  for (std::size_t j = 0; j < db.count(); ++j) r_total += rel.at2(qi, j) != 0.0f;
  if (r_total == 0) return -1.0;
  std::size_t hits = 0;
  double ap = 0;
  for (std::size_t rank = 1; rank <= order.size(); ++rank) {
    if (rel.at2(qi, order[rank - 1].second) != 0.0f) {
      ++hits;
      ap += double(hits) / double(rank);
    }
  }
  return ap / double(r_total);
}

}  // namespace

TEST_CASE("hamming basics") {
  CodeMatrix a = from_rows(4, {{1, 1, -1, -1}});
  CodeMatrix b = from_rows(4, {{1, -1, -1, 1}});
  CHECK(hamming_rows(a, 0, a, 0) == 0);
  CHECK(hamming_rows(a, 0, b, 0) == 2);
  CHECK(hamming_rows(b, 0, a, 0) == 2);
}

TEST_CASE("hamming rejects mismatched code lengths") {
  CodeMatrix a = from_rows(4, {{1, 1, -1, -1}});
  CodeMatrix b = from_rows(8, {{1, -1, -1, 1, 1, 1, 1, 1}});
  CHECK_THROWS_AS(hamming_rows(a, 0, b, 0), ShapeError);
}

TEST_CASE("hamming complement identity") {
  RngStream rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 16;
    CodeMatrix a = rand_codes(1, k, rng);
    CodeMatrix b = rand_codes(1, k, rng);
    CodeMatrix nb = b;
    for (auto& v : nb.rows) v = -v;
    CHECK(hamming_rows(a, 0, b, 0) == hamming_rows(b, 0, a, 0));
    CHECK(hamming_rows(a, 0, b, 0) == k - hamming_rows(a, 0, nb, 0));
  }
}

TEST_CASE("perfect ranking scores full mAP") {
  RngStream rng(2);
  const std::size_t k = 8;
  // queries identical to their relevant db items, all else far
  CodeMatrix q = from_rows(k, {{1, 1, 1, 1, 1, 1, 1, 1}, {-1, -1, -1, -1, -1, -1, -1, -1}});
  CodeMatrix db = from_rows(k, {{1, 1, 1, 1, 1, 1, 1, 1},
                                {-1, -1, -1, -1, -1, -1, -1, -1},
                                {1, 1, 1, 1, -1, -1, -1, -1}});
  Tensor<float> rel({2, 3}, {1, 0, 0, 0, 1, 0});
  MapResult res = map_at_all(q, db, rel);
  CHECK(res.map == 1.0);
  CHECK(res.per_query_ap.size() == 2);
  CHECK(res.excluded == 0);
}

TEST_CASE("AP hand example five sixths") {
  // ranked relevance (1, 0, 1) with R = 2: AP = (1/1 + 2/3) / 2
  const std::size_t k = 8;
  CodeMatrix q = from_rows(k, {{1, 1, 1, 1, 1, 1, 1, 1}});
  // distances 0, 1, 2 from the query
  CodeMatrix db = from_rows(k, {{1, 1, 1, 1, 1, 1, 1, 1},
                                {-1, 1, 1, 1, 1, 1, 1, 1},
                                {-1, -1, 1, 1, 1, 1, 1, 1}});
  Tensor<float> rel({1, 3}, {1, 0, 1});
  MapResult res = map_at_all(q, db, rel);
  CHECK(res.map == (1.0 + 2.0 / 3.0) / 2.0);
  CHECK(res.map == doctest::Approx(0.8333).epsilon(1e-4));
}

TEST_CASE("ties break by ascending database index") {
  const std::size_t k = 8;
  CodeMatrix q = from_rows(k, {{1, 1, 1, 1, 1, 1, 1, 1}});
  // db items 0 and 1 both at distance 1; item 2 at distance 0
  CodeMatrix db = from_rows(k, {{-1, 1, 1, 1, 1, 1, 1, 1},
                                {1, -1, 1, 1, 1, 1, 1, 1},
                                {1, 1, 1, 1, 1, 1, 1, 1}});
  // only the second tied item is relevant: ranking is (2, 0, 1) so the
  // relevant item sits at rank 3
  Tensor<float> rel({1, 3}, {0, 1, 0});
  MapResult res = map_at_all(q, db, rel);
  CHECK(res.map == 1.0 / 3.0);
}

TEST_CASE("mAP matches the brute-force oracle on a random instance") {
  RngStream rng(3);
  const std::size_t nq = 20, nd = 50, k = 16;
  CodeMatrix q = rand_codes(nq, k, rng);
  CodeMatrix db = rand_codes(nd, k, rng);
  Tensor<float> rel({nq, nd});
  for (std::size_t i = 0; i < rel.numel(); ++i) rel[i] = rng.uniform() < 0.3f ? 1.0f : 0.0f;
  MapResult res = map_at_all(q, db, rel);

  double want = 0;
  std::size_t scored = 0;
  for (std::size_t qi = 0; qi < nq; ++qi) {
    const double ap = oracle_ap(q, qi, db, rel);
    if (ap >= 0) {
      want += ap;
      ++scored;
    }
  }
  want /= double(scored);
  CHECK(res.per_query_ap.size() == scored);
  CHECK(std::fabs(res.map - want) <= 1e-12);
  for (std::size_t i = 0; i < res.per_query_ap.size(); ++i) {
    const double ap = oracle_ap(q, res.scored_queries[i], db, rel);
    CHECK(std::fabs(res.per_query_ap[i] - ap) <= 1e-12);
  }
}

TEST_CASE("queries with no relevant items are excluded and counted") {
  RngStream rng(4);
  const std::size_t k = 8;
  CodeMatrix q = rand_codes(3, k, rng);
  CodeMatrix db = rand_codes(4, k, rng);
  Tensor<float> rel({3, 4});
  rel.at2(0, 1) = 1.0f;  // query 0 scored, queries 1 and 2 excluded
  MapResult res = map_at_all(q, db, rel);
  CHECK(res.per_query_ap.size() == 1);
  CHECK(res.excluded == 2);
  CHECK(res.scored_queries == std::vector<std::size_t>{0});
}

TEST_CASE("mAP invariant under consistent database permutation") {
  // the ranking key is (distance, tie-break key); permuting items together
  // with their keys must leave every AP unchanged. map_at_all's key is the
  // storage index, so compare it against a keyed oracle that carries the
  // original indices through the shuffle.
  RngStream rng(5);
  const std::size_t nq = 6, nd = 12, k = 16;
  CodeMatrix q = rand_codes(nq, k, rng);
  CodeMatrix db = rand_codes(nd, k, rng);
  Tensor<float> rel({nq, nd});
  for (std::size_t i = 0; i < rel.numel(); ++i) rel[i] = rng.uniform() < 0.4f ? 1.0f : 0.0f;
  MapResult base = map_at_all(q, db, rel);

  std::vector<std::size_t> perm(nd);
  for (std::size_t i = 0; i < nd; ++i) perm[i] = i;
  for (std::size_t i = nd; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
  CodeMatrix pdb;
  pdb.k = k;
  pdb.rows.resize(nd * k);
  Tensor<float> prel({nq, nd});
  for (std::size_t j = 0; j < nd; ++j) {
    std::copy(db.rows.begin() + std::ptrdiff_t(perm[j] * k),
              db.rows.begin() + std::ptrdiff_t((perm[j] + 1) * k),
              pdb.rows.begin() + std::ptrdiff_t(j * k));
    for (std::size_t i = 0; i < nq; ++i) prel.at2(i, j) = rel.at2(i, perm[j]);
  }

  double moved = 0;
  std::size_t scored = 0;
  for (std::size_t qi = 0; qi < nq; ++qi) {
    std::vector<std::pair<std::size_t, std::size_t>> order;  // (distance, original key)
    for (std::size_t j = 0; j < nd; ++j) order.push_back({hamming_rows(q, qi, pdb, j), perm[j]});
    std::sort(order.begin(), order.end());
    std::vector<float> rel_by_key(nd);
    for (std::size_t j = 0; j < nd; ++j) rel_by_key[perm[j]] = prel.at2(qi, j);
    std::size_t r_total = 0;
    for (float v : rel_by_key) r_total += v != 0.0f;
    if (r_total == 0) continue;
    std::size_t hits = 0;
    double ap = 0;
    for (std::size_t rank = 1; rank <= nd; ++rank) {
      if (rel_by_key[order[rank - 1].second] != 0.0f) {
        ++hits;
        ap += double(hits) / double(rank);
      }
    }
    moved += ap / double(r_total);
    ++scored;
  }
  moved /= double(scored);
  CHECK(std::fabs(base.map - moved) <= 1e-15);
}

TEST_CASE("empty database is rejected") {
  RngStream rng(6);
  CodeMatrix q = rand_codes(2, 8, rng);
  CodeMatrix db;
  db.k = 8;
  Tensor<float> rel({2, 0});
  CHECK_THROWS_AS(map_at_all(q, db, rel), ContractError);
  CHECK_THROWS_AS(pr_curve(q, db, rel), ContractError);
}

TEST_CASE("pr curve hand instance") {
  const std::size_t k = 8;
  CodeMatrix q = from_rows(k, {{-1, -1, -1, -1, -1, -1, -1, -1}});
  auto at_distance = [&](std::size_t d) {
    std::vector<int> row(k, -1);
    for (std::size_t i = 0; i < d; ++i) row[i] = 1;
    return row;
  };
  CodeMatrix db = from_rows(
      k, {at_distance(0), at_distance(1), at_distance(3), at_distance(3), at_distance(7)});
  Tensor<float> rel({1, 5}, {1, 0, 1, 0, 1});
  std::vector<PrPoint> pr = pr_curve(q, db, rel);
  REQUIRE(pr.size() == k + 1);
  CHECK(pr[0].precision == 1.0);
  CHECK(pr[0].recall == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(pr[1].precision == 0.5);
  CHECK(pr[1].recall == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(pr[2].precision == 0.5);
  CHECK(pr[3].precision == 0.5);
  CHECK(pr[3].recall == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(pr[6].precision == 0.5);
  CHECK(pr[7].precision == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(pr[7].recall == 1.0);
  CHECK(pr[8].recall == 1.0);
}

TEST_CASE("recall is monotone and saturates at the full radius") {
  RngStream rng(7);
  const std::size_t nq = 5, nd = 20, k = 16;
  CodeMatrix q = rand_codes(nq, k, rng);
  CodeMatrix db = rand_codes(nd, k, rng);
  Tensor<float> rel({nq, nd});
  for (std::size_t i = 0; i < rel.numel(); ++i) rel[i] = rng.uniform() < 0.4f ? 1.0f : 0.0f;
  std::vector<PrPoint> pr = pr_curve(q, db, rel);
  REQUIRE(pr.size() == k + 1);
  for (std::size_t r = 1; r <= k; ++r) CHECK(pr[r].recall >= pr[r - 1].recall);
  CHECK(pr[k].recall == 1.0);
}

TEST_CASE("radius zero retrieves nothing without duplicates") {
  const std::size_t k = 8;
  CodeMatrix q = from_rows(k, {{1, 1, 1, 1, 1, 1, 1, 1}});
  CodeMatrix db = from_rows(k, {{-1, 1, 1, 1, 1, 1, 1, 1}, {1, -1, -1, 1, 1, 1, 1, 1}});
  Tensor<float> rel({1, 2}, {1, 1});
  std::vector<PrPoint> pr = pr_curve(q, db, rel);
  CHECK(pr[0].recall == 0.0);
  CHECK(pr[0].precision == 1.0);  // empty retrieval convention
}

TEST_CASE("packed distances agree with unpacked rows") {
  RngStream rng(8);
  for (std::size_t k : {std::size_t(16), std::size_t(32), std::size_t(64)}) {
    CodeMatrix c = rand_codes(40, k, rng);
    const std::vector<std::uint8_t> packed = pack_codes(c);
    const std::size_t stride = k / 8;
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t a = rng.uniform_index(40), b = rng.uniform_index(40);
      CHECK(hamming_packed(packed.data() + a * stride, packed.data() + b * stride, stride) ==
            hamming_rows(c, a, c, b));
    }
  }
}

TEST_CASE("metrics serialize to json and csv") {
  RngStream rng(9);
  const std::size_t k = 16;
  CodeMatrix q = rand_codes(3, k, rng);
  CodeMatrix db = rand_codes(10, k, rng);
  Tensor<float> rel({3, 10});
  for (std::size_t i = 0; i < rel.numel(); ++i) rel[i] = rng.uniform() < 0.5f ? 1.0f : 0.0f;
  MapResult res = map_at_all(q, db, rel);
  std::vector<PrPoint> pr = pr_curve(q, db, rel);

  const std::string json = metrics_to_json("I2T", k, res, pr);
  CHECK(json.find("\"direction\": \"I2T\"") != std::string::npos);
  CHECK(json.find("\"mAP\"") != std::string::npos);
  CHECK(json.find("\"pr_points\"") != std::string::npos);

  const std::string csv = pr_to_csv(pr);
  CHECK(csv.rfind("radius,precision,recall\n", 0) == 0);
  std::size_t lines = 0;
  for (char ch : csv) lines += ch == '\n';
  CHECK(lines == k + 2);
}
