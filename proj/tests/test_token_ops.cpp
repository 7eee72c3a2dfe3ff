// Sorting, pruning, merging, and uncompression unit tests.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "diffrate/rng.hpp"
#include "diffrate/token_ops.hpp"

using namespace diffrate;

namespace {

std::vector<int> identity_origins(size_t n) {
    std::vector<int> o(n);
    std::iota(o.begin(), o.end(), 0);
    return o;
}

ImportanceOrder sort_by_ac(const std::vector<double>& ac, const std::vector<double>& mask) {
    std::vector<double> dummy;
    return sort_tokens(ac, dummy, dummy, mask, identity_origins(ac.size()),
                       SortMetric::ClassAttention, 0, 0);
}

}  // namespace

TEST_CASE("sort_tokens basics") {
    SUBCASE("already sorted") {
        auto order = sort_by_ac({0.9, 0.5, 0.3, 0.2}, {1, 1, 1, 1});
        CHECK(order.order == std::vector<int>{0, 1, 2, 3});
        CHECK(order.rank_of[3] == 3);
    }
    SUBCASE("class token leads even with low score") {
        auto order = sort_by_ac({0.01, 0.5, 0.9, 0.2}, {1, 1, 1, 1});
        CHECK(order.order[0] == 0);
        CHECK(order.order[1] == 2);
    }
    SUBCASE("equal metrics break ties by ascending index deterministically") {
        auto a = sort_by_ac({0.5, 0.25, 0.25, 0.25}, {1, 1, 1, 1});
        auto b = sort_by_ac({0.5, 0.25, 0.25, 0.25}, {1, 1, 1, 1});
        CHECK(a.order == std::vector<int>{0, 1, 2, 3});
        CHECK(a.order == b.order);
    }
    SUBCASE("masked token ranks last despite the highest metric") {
        auto order = sort_by_ac({0.1, 0.2, 0.95, 0.3}, {1, 1, 0, 1});
        CHECK(order.order.back() == 2);
        CHECK(order.metric.back() == -std::numeric_limits<double>::infinity());
    }
}

TEST_CASE("sort metric variants") {
    std::vector<double> ac = {0.4, 0.3, 0.29, 0.01};
    std::vector<double> vn = {1.0, 1.0, 2.0, 1.0};
    std::vector<double> ai = {0.1, 0.05, 0.2, 0.65};
    std::vector<double> mask = {1, 1, 1, 1};
    auto origins = identity_origins(4);

    auto plain = sort_tokens(ac, vn, ai, mask, origins, SortMetric::ClassAttention, 0, 0);
    CHECK(plain.order == std::vector<int>{0, 1, 2, 3});

    // value-norm product lifts token 2 above token 1
    auto prod = sort_tokens(ac, vn, ai, mask, origins,
                            SortMetric::ClassAttentionValueNorm, 0, 0);
    CHECK(prod.order == std::vector<int>{0, 2, 1, 3});

    auto img = sort_tokens(ac, vn, ai, mask, origins, SortMetric::ImageAttention, 0, 0);
    CHECK(img.order == std::vector<int>{0, 3, 2, 1});

    // random is deterministic under the seed and changes with it
    auto r1 = sort_tokens(ac, vn, ai, mask, origins, SortMetric::Random, 7, 0);
    auto r2 = sort_tokens(ac, vn, ai, mask, origins, SortMetric::Random, 7, 0);
    CHECK(r1.order == r2.order);
}

TEST_CASE("prune") {
    std::vector<double> ac = {0.9, 0.0, 0.0, 0.0, 0.0};
    ImportanceOrder order;
    order.order = {0, 3, 1, 4, 2};
    order.metric = {0.9, 0.8, 0.7, 0.6, 0.5};
    order.rank_of = {0, 2, 4, 1, 3};

    CHECK(prune(order, 0) == order.order);                      // identity
    CHECK(prune(order, 4) == std::vector<int>{0});              // class only
    CHECK(prune(order, 2) == std::vector<int>{0, 3, 1});        // drops 4 and 2
    CHECK_THROWS(prune(order, 5));
}

TEST_CASE("merge") {
    SUBCASE("zero merges is the identity with an empty map") {
        Tensor x({3, 2}, {1, 0, 0, 1, 1, 1});
        auto [out, map] = merge(x, 0);
        CHECK(map.empty());
        CHECK(out.data() == x.data());
    }
    SUBCASE("identical vectors leave the destination unchanged") {
        Tensor x({3, 4}, {9, 9, 9, 9, 2, 3, 4, 5, 2, 3, 4, 5});
        auto [out, map] = merge(x, 1);
        REQUIRE(map.entries.size() == 1);
        CHECK(map.entries[0].source == 2);
        CHECK(map.entries[0].dest == 1);
        CHECK(map.entries[0].group_size == 2);
        for (int j = 0; j < 4; ++j) CHECK(out.at(1, j) == doctest::Approx(x.at(1, j)));
        CHECK(out.rows() == 2);
    }
    SUBCASE("source picks the destination with maximal cosine") {
        // d1 nearly parallel to s (cos ~0.9), d2 nearly orthogonal (cos ~0.4)
        Tensor x({4, 2},
                 {5, 5,               // class
                  1.0, 0.436,         // d1: cos(s, d1) ~ 0.9 direction
                  1.0, 2.29,          // d2: cos(s, d2) ~ 0.4 direction
                  1.0, 0.0});         // s
        auto [out, map] = merge(x, 1);
        REQUIRE(map.entries.size() == 1);
        CHECK(map.entries[0].dest == 1);
        CHECK(out.at(1, 0) == doctest::Approx((1.0 + 1.0) / 2));
        CHECK(out.at(1, 1) == doctest::Approx((0.436 + 0.0) / 2));
    }
    SUBCASE("no eligible destination is rejected") {
        Tensor x({2, 2}, {1, 2, 3, 4});
        CHECK_THROWS(merge(x, 1));  // only the class row would remain
    }
    SUBCASE("joint mean over multiple sources") {
        Tensor x({4, 1}, {7, 1, 2, 4});
        std::vector<int> sources = {2, 3}, dests = {1};
        MergeMap map = plan_merge(x, sources, dests);
        Tensor out = apply_merge(x, map);
        CHECK(out.at(1, 0) == doctest::Approx((1 + 2 + 4) / 3.0));
        CHECK(map.entries[0].group_size == 3);
        CHECK(map.entries[1].group_size == 3);
    }
}

TEST_CASE("merge map determinism") {
    Rng rng(2027);
    for (int r = 0; r < 20; ++r) {
        std::vector<double> data(8 * 3);
        for (double& v : data) v = rng.uniform(-1, 1);
        Tensor x({8, 3}, data);
        auto [out1, m1] = merge(x, 3);
        auto [out2, m2] = merge(Tensor({8, 3}, data), 3);
        REQUIRE(m1.entries.size() == m2.entries.size());
        for (size_t i = 0; i < m1.entries.size(); ++i) {
            CHECK(m1.entries[i].source == m2.entries[i].source);
            CHECK(m1.entries[i].dest == m2.entries[i].dest);
        }
        CHECK(out1.data() == out2.data());
    }
}

TEST_CASE("uncompress") {
    SUBCASE("empty map, no pruning is the identity") {
        Tensor t({3, 2}, {1, 2, 3, 4, 5, 6});
        Tensor out = uncompress(t, {0, 1, 2}, MergeMap{}, {}, 3);
        CHECK(out.data() == t.data());
    }
    SUBCASE("merged source copies its destination") {
        Tensor t({2, 2}, {1, 2, 3, 4});
        MergeMap map;
        map.entries.push_back({2, 1, 2});  // origin 2 merged into origin 1
        Tensor out = uncompress(t, {0, 1}, map, {}, 3);
        CHECK(out.at(1, 0) == 3.0);
        CHECK(out.at(2, 0) == 3.0);
        CHECK(out.at(2, 1) == 4.0);
    }
    SUBCASE("pruned positions become zero, kept rows are bit-equal") {
        Tensor t({2, 2}, {0.1, 0.2, 0.3, 0.4});
        Tensor out = uncompress(t, {0, 3}, MergeMap{}, {1, 2}, 4);
        CHECK(out.at(0, 0) == 0.1);
        CHECK(out.at(3, 1) == 0.4);
        CHECK(out.at(1, 0) == 0.0);
        CHECK(out.at(2, 1) == 0.0);
    }
    SUBCASE("round-trip through merge keeps kept rows bit-equal") {
        Rng rng(5);
        std::vector<double> data(6 * 4);
        for (double& v : data) v = rng.uniform(-2, 2);
        Tensor x({6, 4}, data);
        auto [compressed, map] = merge(x, 2);
        // rows 0..3 kept with origins 0..3 (already rank-ordered input)
        Tensor restored = uncompress(compressed, {0, 1, 2, 3}, map, {}, 6);
        CHECK(restored.rows() == 6);
        for (int r = 0; r < 4; ++r)
            for (int j = 0; j < 4; ++j) CHECK(restored.at(r, j) == compressed.at(r, j));
        for (const MergeEntry& e : map.entries)
            for (int j = 0; j < 4; ++j)
                CHECK(restored.at(e.source, j) == compressed.at(e.dest, j));
    }
    SUBCASE("inconsistent coverage is rejected") {
        Tensor t({2, 2}, {1, 2, 3, 4});
        CHECK_THROWS(uncompress(t, {0, 1}, MergeMap{}, {}, 3));       // origin 2 uncovered
        CHECK_THROWS(uncompress(t, {0, 1}, MergeMap{}, {1}, 3));      // origin 1 double
        MergeMap bad;
        bad.entries.push_back({2, 3, 2});  // destination 3 is not kept
        CHECK_THROWS(uncompress(t, {0, 1}, bad, {}, 3));
    }
}

TEST_CASE("apply_merge gradient flows through the averaging") {
    Tensor x({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    MergeMap map;
    map.entries.push_back({2, 1, 2});
    Tensor out = apply_merge(x, map);
    backward(sum_all(out));
    // row 0 untouched: grad 1; rows 1 and 2 each feed the mean with weight 1/2
    // and row 2 also remains in place
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[2] == doctest::Approx(0.5));
    CHECK(x.grad()[4] == doctest::Approx(1.5));  // in place + half the mean
}
