#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include <tripembed/corpus.hpp>
#include <tripembed/skipgram.hpp>

#include "oracles.hpp"
#include "support.hpp"

using namespace tripembed;
using namespace tripembed::skipgram;
using tripembed::corpus::SessionCorpus;
using tripembed::corpus::SyntheticConfig;

namespace {

oracle::Mat to_rows(const nn::Matrix& m) {
    oracle::Mat rows;
    for (std::size_t r = 0; r < m.rows(); ++r) rows.emplace_back(m.row(r).begin(), m.row(r).end());
    return rows;
}

// One trained model on the 10-cluster synthetic corpus, shared by the slower tests.
struct Trained {
    SessionCorpus corpus;
    corpus::SyntheticGroundTruth truth;
    corpus::Vocabulary vocab;
    SkipgramConfig config;
    TrainResult result;
};

const Trained& trained() {
    static const Trained t = [] {
        Trained out;
        SyntheticConfig cfg;
        cfg.n_travelers = 4000;
        cfg.n_listings = 500;
        std::tie(out.corpus, out.truth) = corpus::generate_synthetic(cfg);
        out.vocab = corpus::build_vocabulary(out.corpus);
        out.result = train_embeddings(out.corpus, out.vocab, out.config);
        return out;
    }();
    return t;
}

}  // namespace

TEST(TrainingPairs, WindowOne) {
    const std::vector<std::uint32_t> s{0, 1, 2};
    const std::vector<TrainingPair> expected{{0, 1}, {1, 0}, {1, 2}, {2, 1}};
    EXPECT_EQ(generate_training_pairs(s, 1), expected);
}

TEST(TrainingPairs, WindowTwoAddsEnds) {
    const std::vector<std::uint32_t> s{0, 1, 2};
    const auto pairs = generate_training_pairs(s, 2);
    EXPECT_EQ(pairs.size(), 6u);
    EXPECT_NE(std::find(pairs.begin(), pairs.end(), TrainingPair{0, 2}), pairs.end());
    EXPECT_NE(std::find(pairs.begin(), pairs.end(), TrainingPair{2, 0}), pairs.end());
}

TEST(TrainingPairs, SingleViewIsEmpty) {
    const std::vector<std::uint32_t> s{5};
    EXPECT_TRUE(generate_training_pairs(s, 3).empty());
    EXPECT_TRUE(generate_training_pairs(std::vector<std::uint32_t>{}, 3).empty());
}

TEST(TrainingPairs, MatchBruteForceEnumeration) {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::uint32_t> s(uniform_index(rng, 12));
        for (auto& x : s) x = static_cast<std::uint32_t>(uniform_index(rng, 6));
        const int c = 1 + static_cast<int>(uniform_index(rng, 5));
        EXPECT_EQ(generate_training_pairs(s, static_cast<std::size_t>(c)), oracle::window_pairs(s, c));
    }
}

TEST(NegativeSample, TwoListingsForcedOutcome) {
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        for (auto idx : negative_sample(2, 5, 0, rng)) EXPECT_EQ(idx, 1u);
    }
}

TEST(NegativeSample, Cardinality) {
    Rng rng(4);
    EXPECT_EQ(negative_sample(50, 3, 7, rng).size(), 3u);
    EXPECT_THROW(negative_sample(50, 0, 7, rng), ConfigError);
}

TEST(NegativeSample, SingleListingRejected) {
    Rng rng(5);
    try {
        negative_sample(1, 3, 0, rng);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("cannot negative-sample a single-listing vocabulary"), std::string::npos);
    }
}

// 10^6 uniform draws over 1000 indices. Under the null each count is
// Binomial(10^6, 1/1000), so a 3-sigma band is crossed by about 0.27% of
// indices; the test bounds that rate and the chi-square statistic.
TEST(NegativeSample, UniformHistogram) {
    const std::size_t v = 1000, draws = 1'000'000;
    NegativeSampler sampler(v);
    Rng rng(2024);
    std::vector<double> counts(v, 0.0);
    for (std::size_t i = 0; i < draws; ++i) counts[sampler.draw_one(rng)] += 1.0;
    const double expected = static_cast<double>(draws) / static_cast<double>(v);
    const double band = 3.0 * std::sqrt(static_cast<double>(draws) * (1.0 / v) * (1.0 - 1.0 / v));
    std::size_t outside = 0;
    double chi2 = 0.0;
    for (double c : counts) {
        outside += std::abs(c - expected) > band;
        chi2 += (c - expected) * (c - expected) / expected;
    }
    EXPECT_LE(outside, 10u);
    const double df = static_cast<double>(v - 1);
    EXPECT_LT(std::abs(chi2 - df), 5.0 * std::sqrt(2.0 * df));
}

TEST(NegativeSample, PositiveIsAvoided) {
    NegativeSampler sampler(5);
    Rng rng(8);
    std::vector<std::uint32_t> out;
    for (int i = 0; i < 2000; ++i) {
        sampler.draw(4, 2, rng, out);
        for (auto idx : out) EXPECT_NE(idx, 2u);
    }
}

TEST(NegativeSample, SmoothedFollowsCounts) {
    const std::vector<std::uint64_t> counts{1, 16};
    NegativeSampler sampler(counts, 0.75);
    Rng rng(9);
    double hits = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) hits += sampler.draw_one(rng) == 1;
    EXPECT_NEAR(hits / n, 8.0 / 9.0, 0.005);
}

TEST(SgnsStep, ZeroVectorsGiveTwoLnTwo) {
    EmbeddingTable table(4, 3);
    const std::vector<std::uint32_t> negs{2};
    EXPECT_NEAR(sgns_step(0, 1, negs, table, 0.1), 2.0 * std::log(2.0), 1e-15);
}

TEST(SgnsStep, PositiveDotIncreasesFromZeroOutput) {
    Rng rng(12);
    EmbeddingTable table = initial_table(6, 8, rng);
    const auto before = nn::dot(table.output_vectors.row(3), table.input_vectors.row(1));
    EXPECT_EQ(before, 0.0);
    const std::vector<std::uint32_t> negs{0, 4};
    sgns_step(1, 3, negs, table, 0.05);
    EXPECT_GT(nn::dot(table.output_vectors.row(3), table.input_vectors.row(1)), before);
}

TEST(SgnsStep, UpdateIsLearningRateTimesGradient) {
    Rng rng(13);
    EmbeddingTable table(6, 4);
    for (double& x : table.input_vectors.flat()) x = uniform_real(rng, -1, 1);
    for (double& x : table.output_vectors.flat()) x = uniform_real(rng, -1, 1);
    const EmbeddingTable before = table;
    const std::vector<std::uint32_t> negs{0, 5};
    const std::vector<std::span<const double>> neg_rows{before.output_vectors.row(0), before.output_vectors.row(5)};
    const auto g = sgns_loss_and_gradients(before.input_vectors.row(2), before.output_vectors.row(3), neg_rows);
    const double lr = 0.1;
    const double loss = sgns_step(2, 3, negs, table, lr);
    EXPECT_DOUBLE_EQ(loss, g.loss);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(table.input_vectors.row(2)[i], before.input_vectors.row(2)[i] - lr * g.center[i], 1e-14);
        EXPECT_NEAR(table.output_vectors.row(3)[i], before.output_vectors.row(3)[i] - lr * g.context[i], 1e-14);
        EXPECT_NEAR(table.output_vectors.row(0)[i], before.output_vectors.row(0)[i] - lr * g.negatives[0][i], 1e-14);
    }
    EXPECT_EQ(table.input_vectors.row(4)[0], before.input_vectors.row(4)[0]);
}

TEST(SgnsStep, ExtremeLogitsStayFinite) {
    EmbeddingTable table(3, 2);
    for (double& x : table.input_vectors.flat()) x = 100.0;
    for (double& x : table.output_vectors.flat()) x = -100.0;
    const std::vector<std::uint32_t> negs{2};
    const double loss = sgns_step(0, 1, negs, table, 0.01);
    EXPECT_TRUE(std::isfinite(loss));
    EXPECT_NEAR(loss, 30.0, 1e-9);
    EXPECT_TRUE(table.finite());
}

TEST(SgnsStep, PreconditionsAndNumericErrors) {
    EmbeddingTable table(3, 2);
    const std::vector<std::uint32_t> negs{1};
    EXPECT_THROW(sgns_step(0, 5, negs, table, 0.1), DataError);
    EXPECT_THROW(sgns_step(0, 1, negs, table, 0.0), ConfigError);
    table.input_vectors.row(0)[0] = std::numeric_limits<double>::infinity();
    table.output_vectors.row(1)[0] = 0.0;
    table.output_vectors.row(1)[1] = 1.0;
    table.input_vectors.row(0)[1] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(sgns_step(0, 1, negs, table, 0.1), NumericError);
}

TEST(SgnsStep, GradientMatchesFiniteDifferences) {
    Rng rng(14);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 2 + uniform_index(rng, 10), k = 1 + uniform_index(rng, 6);
        nn::Vector theta((2 + k) * d);
        for (double& x : theta) x = uniform_real(rng, -1.0, 1.0);
        auto evaluate = [&](std::span<const double> p) {
            std::vector<std::span<const double>> negs;
            for (std::size_t j = 0; j < k; ++j) negs.push_back(p.subspan((2 + j) * d, d));
            return sgns_loss_and_gradients(p.subspan(0, d), p.subspan(d, d), negs);
        };
        const auto g = evaluate(theta);
        nn::Vector analytic(g.center);
        analytic.insert(analytic.end(), g.context.begin(), g.context.end());
        for (const auto& n : g.negatives) analytic.insert(analytic.end(), n.begin(), n.end());
        const auto r = nn::grad_check([&](std::span<const double> p) { return evaluate(p).loss; }, theta, analytic);
        EXPECT_LT(r.max_relative_error, 1e-4);
    }
}

TEST(TrainEmbeddings, ConfigInvariants) {
    SkipgramConfig cfg;
    cfg.epochs = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.window = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.dim = 1;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.learning_rate_final = 0.1;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.negatives = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_NO_THROW(SkipgramConfig{}.validate());

    const auto& t = trained();
    cfg = {};
    cfg.epochs = 0;
    EXPECT_THROW(train_embeddings(t.corpus, t.vocab, cfg), ConfigError);
}

TEST(TrainEmbeddings, InitialTableShape) {
    Rng rng(15);
    const auto table = initial_table(20, 8, rng);
    for (double x : table.input_vectors.flat()) {
        EXPECT_GE(x, -0.5 / 8);
        EXPECT_LE(x, 0.5 / 8);
    }
    for (double x : table.output_vectors.flat()) EXPECT_EQ(x, 0.0);
}

TEST(TrainEmbeddings, SameSeedSameTable) {
    SyntheticConfig cfg;
    cfg.n_travelers = 400;
    cfg.n_listings = 100;
    const auto c = corpus::generate_synthetic(cfg).first;
    const auto vocab = corpus::build_vocabulary(c, 1);
    SkipgramConfig sg;
    sg.epochs = 2;
    const auto a = train_embeddings(c, vocab, sg);
    const auto b = train_embeddings(c, vocab, sg);
    EXPECT_EQ(a.table, b.table);
    sg.seed = 2;
    EXPECT_FALSE(train_embeddings(c, vocab, sg).table == a.table);
}

TEST(TrainEmbeddings, LossTraceAndFiniteness) {
    const auto& t = trained();
    const auto& epochs = t.result.epochs;
    ASSERT_EQ(epochs.size(), t.config.epochs);
    EXPECT_TRUE(t.result.table.finite());
    EXPECT_EQ(t.result.table.size(), t.vocab.size());
    int inversions = 0;
    for (std::size_t e = 1; e < epochs.size(); ++e) {
        EXPECT_GT(epochs[e].pairs, 0u);
        if (epochs[e].mean_loss > epochs[e - 1].mean_loss) {
            ++inversions;
            EXPECT_LE(epochs[e].mean_loss, 1.02 * epochs[e - 1].mean_loss);
        }
    }
    EXPECT_LE(inversions, 1);
}

TEST(TrainEmbeddings, RecoversClusters) {
    const auto& t = trained();
    const auto& table = t.result.table;
    const std::size_t v = table.size();
    std::vector<std::size_t> cluster(v);
    for (std::size_t i = 0; i < v; ++i) cluster[i] = *t.truth.cluster_of(t.vocab.index_to_key[i]);

    double intra = 0.0, inter = 0.0, n_intra = 0.0, n_inter = 0.0;
    for (std::size_t i = 0; i < v; ++i) {
        for (std::size_t j = i + 1; j < v; ++j) {
            const double c = cosine(table.input_vectors.row(i), table.input_vectors.row(j));
            if (cluster[i] == cluster[j]) {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    EXPECT_GE(intra / n_intra - inter / n_inter, 0.2);

    double pure = 0.0;
    for (std::size_t i = 0; i < v; ++i) pure += cluster[nearest_neighbors(table, i, 1)[0].index] == cluster[i];
    EXPECT_GE(pure / static_cast<double>(v), 0.8);
}

// On a tiny vocabulary the full-softmax probability of observed pairs is a
// direct check of the objective, independent of the sampled loss.
TEST(TrainEmbeddings, FullSoftmaxLikelihoodImproves) {
    SessionCorpus c;
    for (int t = 0; t < 300; ++t) {
        const bool left = t % 2 == 0;
        c.sessions.push_back(support::session("T" + std::to_string(t), "s",
                                              left ? std::vector<std::string>{"A", "B", "C", "A", "B"}
                                                   : std::vector<std::string>{"D", "E", "F", "E", "D"}));
    }
    const auto vocab = corpus::build_vocabulary(c, 1);
    SkipgramConfig cfg;
    cfg.dim = 8;
    cfg.subsample_threshold = 1.0;
    cfg.epochs = 5;
    Rng rng(cfg.seed);
    const auto start = initial_table(vocab.size(), cfg.dim, rng);
    const auto result = train_embeddings(c, vocab, cfg);

    auto mean_log_prob = [&](const EmbeddingTable& table) {
        const auto in = to_rows(table.input_vectors), out = to_rows(table.output_vectors);
        double sum = 0.0, n = 0.0;
        for (const auto& s : c.sessions) {
            const auto idx = corpus::view_indices(s, vocab);
            for (auto [ctr, ctx] : oracle::window_pairs(idx, static_cast<int>(cfg.window))) {
                sum += oracle::full_softmax_log_prob(in, out, ctr, ctx);
                n += 1;
            }
        }
        return sum / n;
    };
    EXPECT_NEAR(mean_log_prob(start), -std::log(6.0), 1e-12);
    EXPECT_GT(mean_log_prob(result.table), mean_log_prob(start) + 0.3);
}

TEST(TrainEmbeddings, EmptyVocabularyRejected) {
    EXPECT_THROW(train_embeddings(SessionCorpus{}, corpus::Vocabulary{}, SkipgramConfig{}), ConfigError);
}

TEST(NearestNeighbors, IdenticalRowComesFirst) {
    nn::Matrix m(4, 3);
    const double rows[4][3] = {{1, 2, 3}, {0, 1, 0}, {1, 2, 3}, {3, 0, -1}};
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 3; ++c) m.row(r)[c] = rows[r][c];
    const auto nb = nearest_neighbors(m, 0, 2);
    ASSERT_EQ(nb.size(), 2u);
    EXPECT_EQ(nb[0].index, 2u);
    EXPECT_NEAR(nb[0].cosine, 1.0, 1e-15);
}

TEST(NearestNeighbors, OrthogonalRowsHaveZeroCosine) {
    nn::Matrix m(3, 3);
    for (std::size_t r = 0; r < 3; ++r) m.row(r)[r] = 1.0;
    const auto nb = nearest_neighbors(m, 1, 2);
    EXPECT_EQ(nb[0].cosine, 0.0);
    EXPECT_EQ(nb[1].cosine, 0.0);
    EXPECT_EQ(nb[0].index, 0u);
    EXPECT_EQ(nb[1].index, 2u);
}

TEST(NearestNeighbors, MatchesBruteForce) {
    Rng rng(16);
    nn::Matrix m(100, 6);
    for (double& x : m.flat()) x = uniform_real(rng, -1, 1);
    const auto rows = to_rows(m);
    for (std::size_t q = 0; q < 100; q += 7) {
        const auto got = nearest_neighbors(m, q, 10);
        const auto want = oracle::brute_neighbors(rows, q, 10);
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            EXPECT_EQ(got[i].index, want[i].first);
            EXPECT_NEAR(got[i].cosine, want[i].second, 1e-12);
        }
    }
}

TEST(NearestNeighbors, Preconditions) {
    nn::Matrix m(3, 2, 1.0);
    EXPECT_THROW(nearest_neighbors(m, 3, 1), DataError);
    EXPECT_THROW(nearest_neighbors(m, 0, 3), ConfigError);
}

TEST(TextTable, RoundTripIsExact) {
    Rng rng(17);
    nn::Matrix m(5, 4);
    for (double& x : m.flat()) x = uniform_real(rng, -1, 1) * std::pow(10.0, uniform_real(rng, -8, 8));
    const std::vector<std::string> keys{"a", "b", "c", "d", "e"};
    std::ostringstream out;
    write_text_table(out, keys, m);
    std::istringstream in(out.str());
    const auto parsed = parse_text_table(in);
    EXPECT_EQ(parsed.keys, keys);
    EXPECT_EQ(parsed.warm_count, 5u);
    EXPECT_EQ(parsed.vectors, m);
    EXPECT_EQ(out.str().substr(0, 4), "5 4\n");
}

TEST(TextTable, ColdstartRowsAreNotWarm) {
    std::istringstream in("1 2\nA 1 2\n#coldstart\nZ 0.5 0.25\r\n");
    const auto parsed = parse_text_table(in);
    EXPECT_EQ(parsed.warm_count, 1u);
    ASSERT_EQ(parsed.keys.size(), 2u);
    EXPECT_EQ(parsed.keys[1], "Z");
    EXPECT_EQ(parsed.vectors.row(1)[1], 0.25);
}

TEST(TextTable, Errors) {
    auto line_of = [](const std::string& text) -> std::size_t {
        std::istringstream in(text);
        try {
            parse_text_table(in);
        } catch (const ParseError& e) {
            return e.line();
        }
        return 0;
    };
    EXPECT_EQ(line_of(""), 0u);
    EXPECT_EQ(line_of("2 2\nA 1 2\nB 1\n"), 3u);
    EXPECT_EQ(line_of("2 2\nA 1 2\nB 1 x\n"), 3u);
    EXPECT_EQ(line_of("1 2\nA 1 nan\n"), 2u);
    EXPECT_EQ(line_of("x\n"), 1u);
    EXPECT_EQ(line_of("3 2\nA 1 2\n"), 2u);
    std::istringstream empty("");
    EXPECT_THROW(parse_text_table(empty), ParseError);
}

TEST(BinaryTable, RoundTripIsExact) {
    support::TempDir dir("bin");
    Rng rng(18);
    EmbeddingTable table(7, 3);
    for (double& x : table.input_vectors.flat()) x = uniform_real(rng, -1, 1);
    for (double& x : table.output_vectors.flat()) x = uniform_real(rng, -1, 1) * 1e-300;
    save_binary_table(dir.file("t.bin"), table);
    EXPECT_EQ(load_binary_table(dir.file("t.bin")), table);
    const auto bytes = support::read_file(dir.file("t.bin"));
    EXPECT_EQ(bytes.substr(0, 4), "S2RE");
    EXPECT_EQ(bytes.size(), 4u + 1 + 16 + 2 * 7 * 3 * 8);
}

TEST(BinaryTable, Errors) {
    support::TempDir dir("binerr");
    support::write_file(dir.file("bad.bin"), "XXXX\x01");
    EXPECT_THROW(load_binary_table(dir.file("bad.bin")), DataError);
    support::write_file(dir.file("short.bin"), std::string("S2RE\x01", 5) + std::string(3, '\0'));
    EXPECT_THROW(load_binary_table(dir.file("short.bin")), DataError);
    EXPECT_THROW(load_binary_table(dir.file("missing.bin")), Error);
}
