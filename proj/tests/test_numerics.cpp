#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "mgsparse/numerics.hpp"

using namespace mgsparse;

namespace {

Matrix make_matrix(std::size_t rows, std::size_t cols, std::initializer_list<float> vals) {
  Matrix m(rows, cols);
  std::copy(vals.begin(), vals.end(), m.data.begin());
  return m;
}

bool bit_equal(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (float& v : m.data) v = rng.normal();
  return m;
}

Vector random_vector(std::size_t n, Rng& rng) {
  Vector v(n);
  for (float& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("matvec basics") {
  Matrix id = make_matrix(2, 2, {1, 0, 0, 1});
  CHECK(matvec(id, {3.0f, 4.0f}) == Vector{3.0f, 4.0f});

  Matrix zero(3, 2);
  CHECK(matvec(zero, {7.0f, -2.0f}) == Vector{0.0f, 0.0f, 0.0f});

  Matrix m = make_matrix(2, 2, {1, 2, 3, 4});
  CHECK(matvec(m, {1.0f, 1.0f}) == Vector{3.0f, 7.0f});

  CHECK_THROWS_AS(matvec(m, {1.0f, 2.0f, 3.0f}), error);
}

TEST_CASE("matvec is deterministic and counts MACs") {
  Rng rng(11);
  Matrix m = random_matrix(13, 7, rng);
  Vector x = random_vector(7, rng);
  Vector a = matvec(m, x);
  Vector b = matvec(m, x);
  CHECK(bit_equal(a, b));

  reset_macs();
  matvec(m, x);
  CHECK(macs() == 13u * 7u);
}

TEST_CASE("masked_matvec") {
  Matrix m = make_matrix(2, 2, {1, 2, 3, 4});
  Vector x{1.0f, 1.0f};

  CHECK(masked_matvec(m, x, {true, false}) == Vector{3.0f, 0.0f});

  reset_macs();
  Vector zeros = masked_matvec(m, x, {false, false});
  CHECK(zeros == Vector{0.0f, 0.0f});
  CHECK(macs() == 0);

  CHECK_THROWS_AS(masked_matvec(m, x, {true}), error);

  // full mask is bit-identical to matvec
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix r = random_matrix(9, 6, rng);
    Vector v = random_vector(6, rng);
    CHECK(bit_equal(masked_matvec(r, v, std::vector<bool>(9, true)), matvec(r, v)));
  }

  reset_macs();
  masked_matvec(m, x, {true, false});
  CHECK(macs() == 2);  // one active row, two columns
}

TEST_CASE("column_pruned_matvec") {
  Matrix m = make_matrix(2, 2, {1, 2, 3, 4});
  CHECK(column_pruned_matvec(m, {5.0f, 0.0f}, {true, false}) == Vector{5.0f, 15.0f});
  CHECK(column_pruned_matvec(m, {5.0f, 9.0f}, {false, false}) == Vector{0.0f, 0.0f});
  CHECK_THROWS_AS(column_pruned_matvec(m, {1.0f, 1.0f}, {true}), error);

  // equals matvec on x with masked entries zeroed, bit for bit
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix r = random_matrix(8, 11, rng);
    Vector v = random_vector(11, rng);
    std::vector<bool> mask(11);
    for (std::size_t j = 0; j < 11; ++j) mask[j] = rng.bernoulli(0.6);
    Vector zeroed = v;
    for (std::size_t j = 0; j < 11; ++j)
      if (!mask[j]) zeroed[j] = 0.0f;
    CHECK(bit_equal(column_pruned_matvec(r, v, mask), matvec(r, zeroed)));
    CHECK(bit_equal(column_pruned_matvec(r, zeroed, mask), matvec(r, zeroed)));
  }

  reset_macs();
  column_pruned_matvec(m, {5.0f, 0.0f}, {true, false});
  CHECK(macs() == 2);  // two rows, one active column
}

TEST_CASE("relu and sigmoid") {
  CHECK(relu(Vector{-1.0f, 0.0f, 2.0f}) == Vector{0.0f, 0.0f, 2.0f});
  // non-positive inputs must produce +0.0, not -0.0
  float z = relu(-0.0f);
  CHECK(std::signbit(z) == false);

  CHECK(sigmoid(0.0f) == 0.5f);
  CHECK(sigmoid(100.0f) == static_cast<float>(1.0 - kSigmoidEps));
  CHECK(sigmoid(-100.0f) == static_cast<float>(kSigmoidEps));
  CHECK(sigmoid(Vector{0.0f}) == Vector{0.5f});
}

TEST_CASE("rng determinism") {
  Rng a(42), b(42), c(43);
  bool all_equal = true;
  bool any_diff = false;
  for (int i = 0; i < 1000; ++i) {
    std::uint64_t va = a.next_u64();
    if (va != b.next_u64()) all_equal = false;
    if (va != c.next_u64()) any_diff = true;
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("rng uniform range and normal moments") {
  Rng rng(7);
  double mean = 0.0, var = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  std::vector<float> zs(n);
  for (float& z : zs) z = rng.normal();
  for (float z : zs) mean += z;
  mean /= n;
  for (float z : zs) var += (z - mean) * (z - mean);
  var /= n;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("rng shuffle is a permutation") {
  Rng rng(9);
  std::vector<std::size_t> v(100);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  rng.shuffle(v);
  std::vector<std::size_t> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
}

TEST_CASE("parallel_for writes per-index slots deterministically") {
  std::vector<int> out(1000, 0);
  parallel_for(out.size(), 4, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) out[i] = static_cast<int>(i * 2);
  });
  for (std::size_t i = 0; i < out.size(); ++i) REQUIRE(out[i] == static_cast<int>(i * 2));
}
