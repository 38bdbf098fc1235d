#include "test_support.hpp"

using namespace aimfscil;
using aimfscil::testing::random_matrix;

namespace {

// Rank blocks per channel by (weight desc, index asc); count rank 0, and rank 1
// when its weight exceeds half of rank 0's.
std::vector<long long> oracle_counts(const std::vector<Matrix>& ws) {
  std::vector<long long> counts(static_cast<std::size_t>(ws.front().rows()), 0);
  for (const auto& w : ws)
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      std::vector<std::pair<double, Eigen::Index>> ranked;
      for (Eigen::Index i = 0; i < w.rows(); ++i) ranked.push_back({-w(i, c), i});
      std::sort(ranked.begin(), ranked.end());
      ++counts[static_cast<std::size_t>(ranked[0].second)];
      if (ranked.size() > 1 && -ranked[1].first > 0.5 * -ranked[0].first)
        ++counts[static_cast<std::size_t>(ranked[1].second)];
    }
  return counts;
}

Matrix columns(std::initializer_list<std::initializer_list<double>> cols) {
  const auto n = static_cast<Eigen::Index>(cols.begin()->size());
  Matrix m(n, static_cast<Eigen::Index>(cols.size()));
  Eigen::Index c = 0;
  for (const auto& col : cols) {
    Eigen::Index i = 0;
    for (double v : col) m(i++, c) = v;
    ++c;
  }
  return m;
}

}  // namespace

TEST(BlockImportance, WorkedExample) {
  const std::vector<Matrix> ws{columns({{0.7, 0.2, 0.1}, {0.4, 0.35, 0.25}})};
  const FrequencyHistogram h = block_importance(ws, "X");
  EXPECT_EQ(h.counts, (std::vector<long long>{2, 1, 0}));
  EXPECT_EQ(h.n_images, 1);
  EXPECT_EQ(h.class_label, "X");
}

TEST(BlockImportance, OneHotIsPure) {
  for (int k = 0; k < 4; ++k) {
    Matrix w = Matrix::Zero(4, 5);
    w.row(k).setOnes();
    const std::vector<Matrix> ws(3, w);
    const FrequencyHistogram h = block_importance(ws);
    for (int i = 0; i < 4; ++i) EXPECT_EQ(h.counts[static_cast<std::size_t>(i)], i == k ? 15 : 0);
    EXPECT_EQ(h.total(), 15);
  }
}

TEST(BlockImportance, UniformTiesGoToLowestTwoBlocks) {
  const std::vector<Matrix> ws(2, Matrix::Constant(4, 3, 0.25));
  const FrequencyHistogram h = block_importance(ws);
  EXPECT_EQ(h.counts, (std::vector<long long>{6, 6, 0, 0}));
  EXPECT_EQ(h.total(), 2 * 3 * 2);
}

TEST(BlockImportance, HalfIsNotEnough) {
  const std::vector<Matrix> exact{columns({{0.6, 0.3, 0.1}})};
  EXPECT_EQ(block_importance(exact).counts, (std::vector<long long>{1, 0, 0}));
  const std::vector<Matrix> above{columns({{0.3, 0.6 + 1e-12, 0.1}})};
  EXPECT_EQ(block_importance(std::vector<Matrix>{columns({{0.5, 0.25 + 1e-9, 0.25 - 1e-9}})}).counts,
            (std::vector<long long>{1, 1, 0}));
  EXPECT_EQ(block_importance(above).counts, (std::vector<long long>{0, 1, 0}));
}

TEST(BlockImportance, SingleBlockCountsOnce) {
  const std::vector<Matrix> ws{Matrix::Ones(1, 4)};
  EXPECT_EQ(block_importance(ws).counts, (std::vector<long long>{4}));
}

TEST(BlockImportance, MatchesOracleOnRandomSoftmaxWeights) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 8, d = 1 + trial % 5;
    std::vector<Matrix> ws;
    for (int i = 0; i < 1 + trial % 4; ++i) ws.push_back(scale_weights(random_matrix(rng, n, d, 1.5)));
    const FrequencyHistogram h = block_importance(ws);
    EXPECT_EQ(h.counts, oracle_counts(ws));
    const long long nd = static_cast<long long>(ws.size()) * d;
    EXPECT_GE(h.total(), nd);
    EXPECT_LE(h.total(), 2 * nd);
    std::vector<Matrix> reversed(ws.rbegin(), ws.rend());
    EXPECT_EQ(block_importance(reversed).counts, h.counts);
  }
}

TEST(BlockImportance, InputErrors) {
  EXPECT_ERROR_KIND(block_importance(std::vector<Matrix>{}), ErrorKind::usage);
  const std::vector<Matrix> mixed{Matrix::Ones(3, 2), Matrix::Ones(2, 2)};
  EXPECT_ERROR_KIND(block_importance(mixed), ErrorKind::usage);
}

TEST(BlockImportance, JsonAndCsvExports) {
  const std::vector<Matrix> ws{columns({{0.7, 0.2, 0.1}, {0.4, 0.35, 0.25}})};
  const FrequencyHistogram h = block_importance(ws, "CycleGAN");
  const json j = to_json(h);
  EXPECT_EQ(j.at("counts").at("1"), 2);
  EXPECT_EQ(j.at("counts").at("3"), 0);
  EXPECT_EQ(j.at("total"), 3);
  EXPECT_EQ(histogram_csv(h), "block,count,normalized\n1,2,0.666667\n2,1,0.333333\n3,0,0.000000\n");
}

TEST(Selector, ParseAndResolve) {
  EXPECT_EQ(parse_block_selector("low").resolve(12), (std::vector<int>{1, 2}));
  EXPECT_EQ(parse_block_selector("low:3").resolve(12), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(parse_block_selector("full").resolve(3), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(parse_block_selector("custom:4,1").resolve(5), (std::vector<int>{4, 1}));
  EXPECT_EQ(parse_block_selector("2,3").describe(), "custom:2,3");
  EXPECT_ERROR_KIND(parse_block_selector("custom:9").resolve(5), ErrorKind::validation);
  EXPECT_ERROR_KIND(parse_block_selector("custom:0").resolve(5), ErrorKind::validation);
  EXPECT_ERROR_KIND(parse_block_selector("custom:x"), ErrorKind::validation);
  EXPECT_ERROR_KIND(parse_block_selector("low:30").resolve(5), ErrorKind::validation);
}

TEST(Embeddings, SingleBlockSelectorReturnsThatProjectedRow) {
  std::mt19937_64 rng(2);
  HeadConfig c;
  c.n_blocks = 4;
  c.d0 = c.d1 = c.d2 = 6;
  c.n_base_classes = 2;
  const HeadParams p = init_head(c);
  const Matrix tokens = random_matrix(rng, 4, 6);
  const Matrix projected = project_tokens(tokens, p);
  EXPECT_EQ(block_level_embedding(tokens, p, BlockSelector::custom({1})), projected.row(0).transpose());
  const Vector full = block_level_embedding(tokens, p, BlockSelector::full());
  EXPECT_LT((full - integrate_tokens(projected, Matrix::Constant(4, 6, 0.25))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Embeddings, LowLevelOnConstStubIsHandComputable) {
  // identity f1 on stub-const: rows are 1, 2, 3, ...; blocks 1..2 average to 1.5.
  const auto bb = make_stub_backbone("stub-const:n=4,d=3");
  PreprocessedImage img{16, 16, "stub-16", std::vector<float>(16 * 16 * 3, 0.f)};
  MemoryFeatureSource src;
  src.add(bb->extract(img, "a"));
  const auto rows = export_embeddings({{"a", "a.png", "K", 1, Split::test}}, src,
                                      aimfscil::testing::identity_head(3, 2), BlockSelector::low());
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].vector, Vector::Constant(3, 1.5));
  EXPECT_EQ(rows[0].class_label, "K");

  aimfscil::testing::TempDir dir;
  write_embedding_table(dir / "emb", rows, BlockSelector::low());
  const ArrayBundle b = read_bundle(dir / "emb");
  EXPECT_EQ(b.at("embeddings").row(0), Matrix::Constant(1, 3, 1.5));
  EXPECT_EQ(b.attributes.at("image_ids"), json::array({"a"}));
  EXPECT_EQ(b.attributes.at("selector"), "low:2");
}
