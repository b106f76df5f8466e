#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "sfe/heads.hpp"
#include "sfe/inference.hpp"
#include "test_util.hpp"

using namespace sfe;
using sfe_test::random_vector;

namespace {

// Direct float64 evaluation of the mean per-row cross-entropy.
double ce_reference(const std::vector<double>& logits, int rows, int cols,
                    const std::vector<int>& targets) {
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    const double* row = logits.data() + static_cast<std::size_t>(r) * cols;
    double mx = row[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double norm = 0.0;
    for (int c = 0; c < cols; ++c) norm += std::exp(row[c] - mx);
    total += mx + std::log(norm) - row[targets[static_cast<std::size_t>(r)]];
  }
  return total / rows;
}

}  // namespace

TEST_CASE("joint label codec covers the documented cases") {
  CHECK(100 * 5 == 500);  // label space size for N=100, K=5
  CHECK(joint_label_encode(0, 0, 100, 5) == 0);
  CHECK(joint_label_encode(3, 2, 100, 5) == 17);
  CHECK(joint_label_decode(17, 100, 5) == std::pair<int, int>{3, 2});
  CHECK_THROWS_AS(joint_label_encode(3, 5, 100, 5), ConfigError);
  CHECK_THROWS_AS(joint_label_decode(500, 100, 5), ConfigError);
}

TEST_CASE("joint label codec is a bijection for all N,K up to 64") {
  for (int n : {1, 2, 7, 64}) {
    for (int k : {1, 2, 9, 64}) {
      for (int flat = 0; flat < n * k; ++flat) {
        auto [y, j] = joint_label_decode(flat, n, k);
        CHECK(joint_label_encode(y, j, n, k) == flat);
      }
    }
  }
}

TEST_CASE("joint head on zero features gives a uniform joint softmax") {
  std::mt19937_64 rng(1);
  auto head = JointHead<float>::make(6, 3, 4, 1, rng);
  auto f = Tensor<float>::zeros({2, 6, 5, 5});
  auto logits = head.forward(f);
  REQUIRE(logits.shape() == Shape{2, 12});
  auto probs = ops::softmax(logits);
  for (float p : probs.values()) CHECK(p == doctest::Approx(1.0f / 12.0f));
}

TEST_CASE("equal joint logits spread probability evenly") {
  auto logits = Tensor<float>::full({1, 4}, 1.3f);  // N=2, K=2
  auto probs = ops::softmax(logits);
  for (float p : probs.values()) CHECK(p == doctest::Approx(0.25f));
}

TEST_CASE("joint softmax matches a direct float64 evaluation") {
  std::mt19937_64 rng(2);
  const int n = 3, k = 3;
  auto head = JointHead<double>::make(5, n, k, 1, rng);
  auto f = Tensor<double>::from_data(
      {2, 5, 3, 3}, random_vector<double>(2 * 5 * 9, rng));
  auto logits = head.forward(f);
  auto probs = ops::softmax(logits);
  for (int b = 0; b < 2; ++b) {
    double norm = 0.0, check = 0.0;
    std::vector<double> ex(static_cast<std::size_t>(n) * k);
    for (int c = 0; c < n * k; ++c) {
      ex[static_cast<std::size_t>(c)] =
          std::exp(logits.values()[static_cast<std::size_t>(b) * n * k + c]);
      norm += ex[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < n * k; ++c) {
      const double want = ex[static_cast<std::size_t>(c)] / norm;
      CHECK(std::abs(probs.values()[static_cast<std::size_t>(b) * n * k + c] - want) < 1e-6);
      check += probs.values()[static_cast<std::size_t>(b) * n * k + c];
    }
    CHECK(std::abs(check - 1.0) < 1e-6);
  }
}

TEST_CASE("joint_loss with K=1 reduces to ordinary cross-entropy") {
  std::mt19937_64 rng(3);
  const int batch = 4, n = 5;
  auto logits = Tensor<double>::from_data(
      {batch, n}, random_vector<double>(batch * n, rng, -3.0, 3.0));
  std::vector<int> labels = {0, 4, 2, 1};
  auto joint = joint_loss(logits, labels, n, 1);
  auto plain = ops::cross_entropy(logits, labels);
  CHECK(std::abs(joint.item() - plain.item()) < 1e-10);
}

TEST_CASE("joint_loss of uniform logits is ln(N*K)") {
  const int n = 4, k = 3, batch = 2;
  auto logits = Tensor<float>::full({batch * k, n * k}, 0.2f);
  std::vector<int> labels = {1, 3};
  CHECK(joint_loss(logits, labels, n, k).item() ==
        doctest::Approx(std::log(static_cast<float>(n * k))));
}

TEST_CASE("joint_loss matches brute-force row enumeration in float64") {
  std::mt19937_64 rng(4);
  const int batch = 2, n = 3, k = 3;
  auto logits = Tensor<double>::from_data(
      {batch * k, n * k},
      random_vector<double>(static_cast<std::size_t>(batch) * k * n * k, rng,
                            -2.0, 2.0));
  std::vector<int> labels = {2, 0};
  std::vector<int> flat;
  for (int j = 0; j < k; ++j)
    for (int b = 0; b < batch; ++b) flat.push_back(labels[static_cast<std::size_t>(b)] * k + j);
  const double want = ce_reference(logits.values(), batch * k, n * k, flat);
  CHECK(std::abs(joint_loss(logits, labels, n, k).item() - want) < 1e-10);
}

TEST_CASE("joint_loss is invariant to permuting blocks with their labels") {
  std::mt19937_64 rng(5);
  const int batch = 3, n = 4, k = 3;
  const int cols = n * k;
  auto logits = Tensor<double>::from_data(
      {batch * k, cols},
      random_vector<double>(static_cast<std::size_t>(batch) * k * cols, rng));
  std::vector<int> labels = {1, 0, 3};
  const double base = joint_loss(logits, labels, n, k).item();

  // Reorder blocks as (2,0,1); score each block against its original
  // transform id via direct enumeration.
  std::vector<int> perm = {2, 0, 1};
  std::vector<double> shuffled(logits.values().size());
  std::vector<int> flat;
  for (int slot = 0; slot < k; ++slot) {
    const int j = perm[static_cast<std::size_t>(slot)];
    for (int b = 0; b < batch; ++b) {
      std::copy_n(logits.values().begin() +
                      (static_cast<std::size_t>(j) * batch + b) * cols,
                  cols,
                  shuffled.begin() +
                      (static_cast<std::size_t>(slot) * batch + b) * cols);
      flat.push_back(labels[static_cast<std::size_t>(b)] * k + j);
    }
  }
  const double permuted = ce_reference(shuffled, batch * k, cols, flat);
  CHECK(std::abs(base - permuted) < 1e-12);
}

TEST_CASE("joint_loss rejects a stack whose rows are not K*B") {
  auto logits = Tensor<float>::zeros({5, 6});
  CHECK_THROWS_AS(joint_loss(logits, {0, 1}, 2, 3), ConfigError);
}

TEST_CASE("two_classifier_loss weights the penultimate head by beta") {
  auto pen = Tensor<float>::from_data({1}, {4.0f});
  auto last = Tensor<float>::from_data({1}, {2.0f});
  CHECK(two_classifier_loss(pen, last, 0.0).item() == doctest::Approx(2.0f));
  CHECK(two_classifier_loss(pen, last, 1.0).item() == doctest::Approx(6.0f));
  CHECK(two_classifier_loss(pen, last, 0.5).item() == doctest::Approx(4.0f));
  CHECK_THROWS_AS(two_classifier_loss(pen, last, 1.5), ConfigError);
  CHECK_THROWS_AS(two_classifier_loss(pen, last, -0.1), ConfigError);
}

TEST_CASE("distillation loss is plain cross-entropy when student equals teacher") {
  std::mt19937_64 rng(6);
  auto student = Tensor<double>::from_data(
      {2, 4}, random_vector<double>(8, rng, -1.0, 1.0));
  auto teacher = ops::softmax(student).detach();
  std::vector<int> labels = {1, 2};
  auto total = distillation_loss(student, labels, teacher);
  auto ce = ops::cross_entropy(student, labels);
  CHECK(std::abs(total.item() - ce.item()) < 1e-12);
}

TEST_CASE("uniform teacher and student give ln N") {
  const int n = 4;
  auto student = Tensor<float>::zeros({3, n});
  auto teacher = Tensor<float>::full({3, n}, 1.0f / n);
  std::vector<int> labels = {0, 1, 3};
  CHECK(distillation_loss(student, labels, teacher).item() ==
        doctest::Approx(std::log(static_cast<float>(n))));
}

TEST_CASE("distillation loss matches a direct float64 formula") {
  std::mt19937_64 rng(7);
  const int batch = 2, n = 5;
  auto student = Tensor<double>::from_data(
      {batch, n}, random_vector<double>(batch * n, rng, -2.0, 2.0));
  auto teacher_logits = Tensor<double>::from_data(
      {batch, n}, random_vector<double>(batch * n, rng, -2.0, 2.0));
  auto teacher = ops::softmax(teacher_logits).detach();
  std::vector<int> labels = {3, 0};

  double want = ce_reference(student.values(), batch, n, labels);
  for (int b = 0; b < batch; ++b) {
    double mx = student.values()[static_cast<std::size_t>(b) * n];
    for (int c = 1; c < n; ++c)
      mx = std::max(mx, student.values()[static_cast<std::size_t>(b) * n + c]);
    double norm = 0.0;
    for (int c = 0; c < n; ++c)
      norm += std::exp(student.values()[static_cast<std::size_t>(b) * n + c] - mx);
    const double lse = mx + std::log(norm);
    for (int c = 0; c < n; ++c) {
      const double p = teacher.values()[static_cast<std::size_t>(b) * n + c];
      const double logq = student.values()[static_cast<std::size_t>(b) * n + c] - lse;
      want += (p > 0 ? p * (std::log(p) - logq) : 0.0) / batch;
    }
  }
  CHECK(std::abs(distillation_loss(student, labels, teacher).item() - want) < 1e-10);
}

TEST_CASE("distillation rejects an unnormalized teacher") {
  auto student = Tensor<float>::zeros({1, 3});
  auto teacher = Tensor<float>::from_data({1, 3}, {0.4f, 0.4f, 0.4f});
  CHECK_THROWS_AS(distillation_loss(student, {0}, teacher), DataError);
}

TEST_CASE("distillation KL term is nonnegative, zero only at equality") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = Tensor<double>::from_data({1, 6}, random_vector<double>(6, rng));
    auto b = Tensor<double>::from_data({1, 6}, random_vector<double>(6, rng));
    auto p = ops::softmax(a);
    auto kl = ops::kl_div(p, ops::log_softmax(b));
    CHECK(kl.item() >= -1e-12);
  }
  auto a = Tensor<double>::from_data({1, 3}, {0.3, -0.2, 1.0});
  auto p = ops::softmax(a);
  CHECK(std::abs(ops::kl_div(p, ops::log_softmax(a)).item()) < 1e-12);
}

TEST_CASE("single_inference restricts the joint head to identity columns") {
  SUBCASE("equal identity logits give a coin flip") {
    // N=2, K=2, class-major layout [a0, ., a1, .] with a0 == a1.
    auto logits = Tensor<float>::from_data({1, 4}, {0.8f, -3.0f, 0.8f, 5.0f});
    auto probs = single_inference(logits, 2, 2);
    CHECK(probs.values()[0] == doctest::Approx(0.5f));
    CHECK(probs.values()[1] == doctest::Approx(0.5f));
  }

  SUBCASE("argmax agrees with the identity restriction of the joint softmax") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 50; ++trial) {
      const int n = 2 + static_cast<int>(rng() % 6);
      const int k = 1 + static_cast<int>(rng() % 4);
      auto logits = Tensor<double>::from_data(
          {3, n * k},
          random_vector<double>(static_cast<std::size_t>(3) * n * k, rng));
      auto probs = single_inference(logits, n, k);
      auto joint = ops::softmax(logits);
      for (int b = 0; b < 3; ++b) {
        int arg_single = 0, arg_joint = 0;
        for (int i = 1; i < n; ++i) {
          if (probs.values()[static_cast<std::size_t>(b) * n + i] >
              probs.values()[static_cast<std::size_t>(b) * n + arg_single])
            arg_single = i;
          if (joint.values()[static_cast<std::size_t>(b) * n * k +
                             static_cast<std::size_t>(i) * k] >
              joint.values()[static_cast<std::size_t>(b) * n * k +
                             static_cast<std::size_t>(arg_joint) * k])
            arg_joint = i;
        }
        CHECK(arg_single == arg_joint);
      }
    }
  }

  SUBCASE("matches the direct formula and ignores constant shifts") {
    std::mt19937_64 rng(10);
    const int n = 5, k = 3;
    auto logits = Tensor<double>::from_data(
        {2, n * k},
        random_vector<double>(static_cast<std::size_t>(2) * n * k, rng));
    auto probs = single_inference(logits, n, k);
    for (int b = 0; b < 2; ++b) {
      double norm = 0.0;
      for (int i = 0; i < n; ++i)
        norm += std::exp(logits.values()[static_cast<std::size_t>(b) * n * k +
                                         static_cast<std::size_t>(i) * k]);
      for (int i = 0; i < n; ++i) {
        const double want =
            std::exp(logits.values()[static_cast<std::size_t>(b) * n * k +
                                     static_cast<std::size_t>(i) * k]) /
            norm;
        CHECK(std::abs(probs.values()[static_cast<std::size_t>(b) * n + i] - want) < 1e-6);
      }
    }
    std::vector<double> shifted = logits.values();
    for (auto& v : shifted) v += 11.5;
    auto probs2 = single_inference(
        Tensor<double>::from_data({2, n * k}, shifted), n, k);
    for (std::size_t i = 0; i < probs.values().size(); ++i)
      CHECK(std::abs(probs.values()[i] - probs2.values()[i]) < 1e-9);
  }
}

TEST_CASE("aggregated_inference") {
  SUBCASE("K=1 with one head equals single_inference exactly") {
    std::mt19937_64 rng(11);
    const int n = 4;
    auto logits = Tensor<float>::from_data(
        {3, n}, random_vector<float>(3 * n, rng));
    auto agg = aggregated_inference<float>({logits}, 3, n, 1);
    auto single = single_inference(logits, n, 1);
    CHECK(agg.values() == single.values());
  }

  SUBCASE("identical blocks collapse to the single result") {
    std::mt19937_64 rng(12);
    const int n = 3, k = 2, batch = 2;
    const int cols = n * (k + 1);
    // One row pattern whose columns are constant per class: scoring any
    // column j of class i reads the same value.
    std::vector<double> row(static_cast<std::size_t>(cols));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= k; ++j)
        row[static_cast<std::size_t>(i) * (k + 1) + j] = 0.3 * i - 0.1;
    std::vector<double> stack;
    for (int r = 0; r < batch * (k + 1); ++r)
      stack.insert(stack.end(), row.begin(), row.end());
    auto stack_t = Tensor<double>::from_data({batch * (k + 1), cols}, stack);
    auto agg = aggregated_inference<double>({stack_t}, batch, n, k + 1);
    std::vector<double> head_row;
    for (int b = 0; b < batch; ++b)
      head_row.insert(head_row.end(), row.begin(), row.end());
    auto single = single_inference(
        Tensor<double>::from_data({batch, cols}, head_row), n, k + 1);
    for (std::size_t i = 0; i < agg.values().size(); ++i)
      CHECK(agg.values()[i] == doctest::Approx(single.values()[i]));
  }

  SUBCASE("matches the direct mean-logit formula") {
    std::mt19937_64 rng(13);
    const int n = 3, k = 3, batch = 2;
    const int cols = n * k;
    auto stack = Tensor<double>::from_data(
        {batch * k, cols},
        random_vector<double>(static_cast<std::size_t>(batch) * k * cols, rng));
    auto agg = aggregated_inference<double>({stack}, batch, n, k);
    for (int b = 0; b < batch; ++b) {
      std::vector<double> z(static_cast<std::size_t>(n), 0.0);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j)
          z[static_cast<std::size_t>(i)] +=
              stack.values()[(static_cast<std::size_t>(j) * batch + b) * cols +
                             static_cast<std::size_t>(i) * k + j];
        z[static_cast<std::size_t>(i)] /= k;
      }
      double norm = 0.0;
      for (int i = 0; i < n; ++i) norm += std::exp(z[static_cast<std::size_t>(i)]);
      for (int i = 0; i < n; ++i) {
        CHECK(std::abs(agg.values()[static_cast<std::size_t>(b) * n + i] -
                       std::exp(z[static_cast<std::size_t>(i)]) / norm) < 1e-6);
      }
    }
  }

  SUBCASE("rejects stacks with missing transform slots") {
    auto stack = Tensor<float>::zeros({5, 6});  // needs 6 rows for K=3, B=2
    CHECK_THROWS_AS(aggregated_inference<float>({stack}, 2, 2, 3), ConfigError);
  }
}

TEST_CASE("distilled_inference softmaxes the single head") {
  auto zero = Tensor<float>::zeros({2, 4});
  auto probs = distilled_inference(zero);
  for (float p : probs.values()) CHECK(p == doctest::Approx(0.25f));

  auto logits = Tensor<double>::from_data({1, 2}, {std::log(3.0), 0.0});
  auto p2 = distilled_inference(logits);
  CHECK(p2.values()[0] == doctest::Approx(0.75));
  CHECK(p2.values()[1] == doctest::Approx(0.25));
}

TEST_CASE("inference scheme names round-trip") {
  for (const auto* name : {"si", "ag", "sd"}) {
    CHECK(scheme_name(scheme_from_string(name)) == name);
  }
  CHECK_THROWS_AS(scheme_from_string("nope"), ConfigError);
}
