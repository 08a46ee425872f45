#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "jps/diagnostics.hpp"
#include "jps/errors.hpp"

using namespace jps;

namespace {

GradSnapshot snap(int N, std::size_t m, const std::vector<double>& vals) {
    GradSnapshot g;
    g.domains = N;
    g.coords = m;
    g.G = Tensor({static_cast<std::size_t>(N), m}, vals);
    return g;
}

GradSnapshot random_snap(SeededRng& rng, int N, std::size_t m) {
    GradSnapshot g;
    g.domains = N;
    g.coords = m;
    g.G = Tensor({static_cast<std::size_t>(N), m});
    for (std::size_t i = 0; i < g.G.size(); ++i) g.G[i] = rng.next_gaussian();
    return g;
}

Mask mask_of(std::vector<std::size_t> sel) {
    Mask m;
    m.selected = std::move(sel);
    m.stage_counts = StageCounts{1, m.selected.size(), m.selected.size()};
    return m;
}

// Independent rank oracle: plain double-precision Gaussian elimination with
// partial pivoting. Exact for small 0/1 matrices.
int gauss_rank(const Tensor& m) {
    const std::size_t R = m.dim(0), C = m.dim(1);
    std::vector<std::vector<double>> a(R, std::vector<double>(C));
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) a[r][c] = m.at2(r, c);
    int rank = 0;
    std::size_t row = 0;
    for (std::size_t col = 0; col < C && row < R; ++col) {
        std::size_t piv = row;
        for (std::size_t r = row + 1; r < R; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        if (std::abs(a[piv][col]) < 1e-9) continue;
        std::swap(a[piv], a[row]);
        for (std::size_t r = row + 1; r < R; ++r) {
            const double f = a[r][col] / a[row][col];
            for (std::size_t c = col; c < C; ++c) a[r][c] -= f * a[row][c];
        }
        ++row;
        ++rank;
    }
    return rank;
}

Tensor gaussian_rows(SeededRng& rng, std::size_t n, std::size_t d, double shift = 0.0) {
    Tensor t({n, d});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.next_gaussian() + shift;
    return t;
}

}  // namespace

TEST_SUITE("diagnostics") {

TEST_CASE("k1 substitution example: beta=2, c_min=1, rho=0.5, n=4 -> 0.5") {
    CHECK(k1_term(2.0, 1.0, 0.5, 4) == 0.5);  // exact in doubles
    // beta=1, c_min=0, rho=0.5, n=1 -> 1/(0+1)/1 = 1
    CHECK(k1_term(1.0, 0.0, 0.5, 1) == 1.0);
}

TEST_CASE("k1 monotonicity in every argument") {
    const double base = k1_term(1.0, 0.5, 0.5, 10);
    CHECK(k1_term(2.0, 0.5, 0.5, 10) > base);      // increasing in beta
    CHECK(k1_term(1.0, 1.0, 0.5, 10) < base);      // decreasing in c_min
    CHECK(k1_term(1.0, 0.5, 0.9, 10) > base);      // increasing in rho
    CHECK(k1_term(1.0, 0.5, 0.1, 10) < base);      // and back down
    CHECK(k1_term(1.0, 0.5, 0.5, 20) < base);      // decreasing in n
    // Dense sampling of the closed form.
    double prev = 0.0;
    for (double rho : {0.1, 0.3, 0.5, 0.7, 0.9, 0.999}) {
        const double v = k1_term(1.5, 0.25, rho, 7);
        CHECK(v > prev);
        prev = v;
    }
}

TEST_CASE("k-term guards") {
    CHECK_THROWS_AS(k1_term(0.0, 1.0, 0.5, 4), ValidationError);
    CHECK_THROWS_AS(k1_term(1.0, -0.1, 0.5, 4), ValidationError);
    CHECK_THROWS_AS(k1_term(1.0, 1.0, 0.0, 4), ValidationError);
    CHECK_THROWS_AS(k1_term(1.0, 1.0, 1.5, 4), ValidationError);
    CHECK_THROWS_AS(k1_term(1.0, 1.0, 0.5, 0), ValidationError);
    // rho = 1 with zero c_min: the degenerate zero-denominator case.
    CHECK_THROWS_AS(k1_term(1.0, 0.0, 1.0, 4), NumericError);
    CHECK_NOTHROW(k1_term(1.0, 0.1, 1.0, 4));
    CHECK_THROWS_AS(k2_first_term(1.0, {}, 0.5, 4), ValidationError);
    CHECK_THROWS_AS(k2_first_term(1.0, {0.5, 0.0}, 1.0, 4), NumericError);
}

TEST_CASE("k2 with equal per-domain c_min collapses to k1") {
    const std::vector<double> equal = {0.7, 0.7, 0.7};
    CHECK(k2_first_term(2.0, equal, 0.3, 12) ==
          doctest::Approx(k1_term(2.0, 0.7, 0.3, 12)).epsilon(1e-15));
    // General case: literal mean of per-domain terms.
    const std::vector<double> mixed = {0.1, 0.9, 0.4};
    double want = 0.0;
    for (double c : mixed) want += k1_term(2.0, c, 0.3, 12);
    want /= 3.0;
    CHECK(k2_first_term(2.0, mixed, 0.3, 12) == doctest::Approx(want).epsilon(1e-15));
}

TEST_CASE("c_min: single-coordinate example and literal scan oracle") {
    GradSnapshot g = snap(2, 3, {0.5, -0.3, 2.0, 1.0, 0.3, -4.0});
    Mask one = mask_of({1});
    auto per = c_min_per_domain(g, one);
    CHECK(per == std::vector<double>{0.3, 0.3});
    // Pooled: mean over domains of column 1 = (-0.3 + 0.3)/2 = 0.
    CHECK(c_min_pooled(g, one) == 0.0);

    SeededRng rng(42);
    for (int trial = 0; trial < 100; ++trial) {
        const int N = 2 + static_cast<int>(rng.next_below(4));
        const std::size_t m = 3 + rng.next_below(20);
        GradSnapshot h = random_snap(rng, N, m);
        std::vector<std::size_t> sel;
        for (std::size_t j = 0; j < m; ++j)
            if (rng.next_double() < 0.4) sel.push_back(j);
        if (sel.empty()) sel.push_back(rng.next_below(m));
        Mask mk = mask_of(sel);
        auto got = c_min_per_domain(h, mk);
        for (int i = 0; i < N; ++i) {
            double want = 1e300;
            for (std::size_t j : sel) want = std::min(want, std::abs(h.at(i, j)));
            CHECK(got[static_cast<std::size_t>(i)] == want);
        }
        double wantp = 1e300;
        for (std::size_t j : sel) {
            double mean = 0.0;
            for (int i = 0; i < N; ++i) mean += h.at(i, j);
            wantp = std::min(wantp, std::abs(mean / N));
        }
        CHECK(c_min_pooled(h, mk) == doctest::Approx(wantp).epsilon(1e-15));
    }
}

TEST_CASE("c_min subset property: smaller mask can only raise the minimum") {
    SeededRng rng(43);
    for (int trial = 0; trial < 50; ++trial) {
        const int N = 2 + static_cast<int>(rng.next_below(3));
        const std::size_t m = 6 + rng.next_below(20);
        GradSnapshot g = random_snap(rng, N, m);
        std::vector<std::size_t> sup;
        for (std::size_t j = 0; j < m; ++j)
            if (rng.next_double() < 0.7) sup.push_back(j);
        if (sup.size() < 2) continue;
        std::vector<std::size_t> sub;
        for (std::size_t j : sup)
            if (rng.next_double() < 0.5) sub.push_back(j);
        if (sub.empty()) sub.push_back(sup[0]);
        auto big = c_min_per_domain(g, mask_of(sup));
        auto small = c_min_per_domain(g, mask_of(sub));
        for (int i = 0; i < N; ++i)
            CHECK(small[static_cast<std::size_t>(i)] >= big[static_cast<std::size_t>(i)]);
    }
}

TEST_CASE("c_min guards: empty mask, out-of-range coordinate") {
    GradSnapshot g = snap(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK_THROWS_AS(c_min_per_domain(g, mask_of({})), ValidationError);
    CHECK_THROWS_AS(c_min_pooled(g, mask_of({})), ValidationError);
    CHECK_THROWS_AS(c_min_per_domain(g, mask_of({7})), ValidationError);
}

TEST_CASE("bound_terms assembles the same numbers as the pieces") {
    SeededRng rng(44);
    GradSnapshot g = random_snap(rng, 3, 12);
    Mask mk = mask_of({0, 4, 9});
    BoundTerms t = bound_terms(g, mk, 1.5, 240, 0.25);
    CHECK(t.c_min_per_domain == c_min_per_domain(g, mk));
    CHECK(t.c_min_pooled == c_min_pooled(g, mk));
    CHECK(t.k1 == k1_term(1.5, t.c_min_pooled, 0.25, 240));
    CHECK(t.k2_first_term == k2_first_term(1.5, t.c_min_per_domain, 0.25, 240));
    CHECK(t.a_distance_proxy.empty());
}

TEST_CASE("jps_vs_direct: identical domains give identical c_min vectors") {
    SeededRng rng(45);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = 6 + rng.next_below(10);
        GradSnapshot g = random_snap(rng, 1, m);
        GradSnapshot dup;
        dup.domains = 2;
        dup.coords = m;
        dup.G = Tensor({2, m});
        for (std::size_t j = 0; j < m; ++j) {
            dup.G.at2(0, j) = g.at(0, j);
            dup.G.at2(1, j) = g.at(0, j);
        }
        CminComparison cmp = jps_vs_direct_cmin(dup, 0.5);
        CHECK(cmp.jps_min_per_domain == cmp.direct_min_per_domain);
    }
}

TEST_CASE("jps_vs_direct adversarial instance: Direct's c_min gets dragged down") {
    // Coord 0 is huge in domain 0 only; Direct's sum statistic grabs it, and
    // its near-zero |G| in domain 1 collapses Direct's domain-1 c_min.
    GradSnapshot g = snap(2, 4, {100.0, 3.0, 2.5, 2.0, 0.001, 3.0, 2.5, 2.0});
    CminComparison cmp = jps_vs_direct_cmin(g, 0.5);
    // JPS step1: top-2 sets {0,1} and {1,2} -> {1}; c_min = (3, 3).
    CHECK(cmp.jps_min_per_domain == std::vector<double>{3.0, 3.0});
    // Direct top-2 of (100.001, 6, 5, 4) = {0, 1}.
    CHECK(cmp.direct_min_per_domain == std::vector<double>{3.0, 0.001});
    CHECK(cmp.direct_min_per_domain[1] < cmp.jps_min_per_domain[1]);
}

TEST_CASE("jps_vs_direct: empty step-1 throws") {
    GradSnapshot g = snap(2, 2, {2.0, 1.0, 1.0, 2.0});
    CHECK_THROWS_AS(jps_vs_direct_cmin(g, 0.5), ValidationError);
}

TEST_CASE("jps_vs_direct Monte-Carlo: JPS mean c_min wins in >= 95% of instances") {
    SeededRng rng(46);
    int valid = 0, wins = 0;
    while (valid < 500) {
        const int N = 2 + static_cast<int>(rng.next_below(2));
        const std::size_t m = 10 + rng.next_below(20);
        GradSnapshot g = random_snap(rng, N, m);
        std::vector<std::size_t> step1 = importance_select(g, 0.5);
        if (step1.empty()) continue;
        ++valid;
        CminComparison cmp = jps_vs_direct_cmin(g, 0.5);
        double mj = 0.0, md = 0.0;
        for (double v : cmp.jps_min_per_domain) mj += v;
        for (double v : cmp.direct_min_per_domain) md += v;
        wins += mj >= md - 1e-15;
    }
    CHECK(wins >= 475);
}

TEST_CASE("a_distance_proxy: same distribution scores near zero over 10 seeds") {
    // Two n-sample draws of the same distribution sit O(sqrt(d/n)) apart,
    // and the discriminator honestly sees that; n must be large enough for
    // the floor to drop under the 0.15 line even on unlucky draws.
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SeededRng rng(900 + seed);
        Tensor a = gaussian_rows(rng, 400, 4);
        Tensor b = gaussian_rows(rng, 400, 4);
        ProxyResult r = a_distance_proxy(a, b, SeededRng(seed));
        CHECK_FALSE(r.degenerate);
        CHECK(r.value < 0.15);
    }
}

TEST_CASE("a_distance_proxy: separated clusters score near two") {
    SeededRng rng(901);
    Tensor a = gaussian_rows(rng, 80, 4, +10.0);
    Tensor b = gaussian_rows(rng, 80, 4, -10.0);
    ProxyResult r = a_distance_proxy(a, b, SeededRng(1));
    CHECK_FALSE(r.degenerate);
    CHECK(r.value > 1.8);
}

TEST_CASE("a_distance_proxy: symmetric under swapping sides within 0.1") {
    SeededRng rng(902);
    Tensor a = gaussian_rows(rng, 300, 3, 0.6);
    Tensor b = gaussian_rows(rng, 300, 3, 0.0);
    const double ab = a_distance_proxy(a, b, SeededRng(2)).value;
    const double ba = a_distance_proxy(b, a, SeededRng(2)).value;
    CHECK(ab > 0.3);  // the shift is real and must register
    CHECK(std::abs(ab - ba) < 0.1);
}

TEST_CASE("a_distance_proxy: guards and degenerate features") {
    SeededRng rng(903);
    Tensor small = gaussian_rows(rng, 19, 3);
    Tensor ok = gaussian_rows(rng, 30, 3);
    CHECK_THROWS_AS(a_distance_proxy(small, ok, SeededRng(0)), ValidationError);
    CHECK_THROWS_AS(a_distance_proxy(ok, small, SeededRng(0)), ValidationError);
    Tensor wrong({30, 2});
    CHECK_THROWS_AS(a_distance_proxy(ok, wrong, SeededRng(0)), DimensionError);

    Tensor flat_a({40, 3});
    flat_a.fill(1.0);
    Tensor flat_b({40, 3});
    flat_b.fill(1.0);
    ProxyResult r = a_distance_proxy(flat_a, flat_b, SeededRng(0));
    CHECK(r.degenerate);
    CHECK(r.value == 0.0);
}

TEST_CASE("a_distance_proxy is unbiased by imbalance: subsamples to the smaller side") {
    SeededRng rng(904);
    Tensor a = gaussian_rows(rng, 40, 3);
    Tensor b = gaussian_rows(rng, 400, 3);
    ProxyResult r = a_distance_proxy(a, b, SeededRng(3));
    CHECK(r.value < 0.4);  // same distribution, must stay near chance
}

TEST_CASE("mask_rank_report: one row -> rank 1, diagonal -> rank k") {
    ModelConfig cfg;
    cfg.num_blocks = 2;
    cfg.d_model = 4;
    cfg.num_tokens = 2;
    cfg.mlp_hidden = 6;
    cfg.num_classes = 3;
    const std::size_t h = 6;

    // Block 1 (the only eligible one at L=1): row 2 fully selected.
    Mask row_mask;
    row_mask.L = 1;
    for (std::size_t c = 0; c < h; ++c) row_mask.selected.push_back(2 * h + c);
    std::sort(row_mask.selected.begin(), row_mask.selected.end());
    auto rep = mask_rank_report(row_mask, cfg);
    REQUIRE(rep.size() == 1);
    CHECK(rep[0].block_index == 1);
    CHECK(rep[0].selected_count == h);
    CHECK(rep[0].weight_selected == h);
    CHECK(rep[0].rank == 1);

    // Diagonal selections across both blocks at L=2, plus one bias coord.
    Mask diag;
    diag.L = 2;
    const std::size_t per_block = 4 * h + h;
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 3; ++i)
            diag.selected.push_back(b * per_block + i * h + i);
    diag.selected.push_back(4 * h + 2);  // bias coord in block 0
    std::sort(diag.selected.begin(), diag.selected.end());
    auto rep2 = mask_rank_report(diag, cfg);
    REQUIRE(rep2.size() == 2);
    CHECK(rep2[0].block_index == 0);
    CHECK(rep2[1].block_index == 1);
    CHECK(rep2[0].selected_count == 4);  // 3 weight + 1 bias
    CHECK(rep2[0].weight_selected == 3);
    CHECK(rep2[0].rank == 3);
    CHECK(rep2[1].rank == 3);

    Mask empty;
    empty.L = 1;
    auto rep3 = mask_rank_report(empty, cfg);
    REQUIRE(rep3.size() == 1);
    CHECK(rep3[0].rank == 0);
    Mask headonly;
    headonly.L = 0;
    CHECK(mask_rank_report(headonly, cfg).empty());
}

TEST_CASE("mask_rank_report vs independent elimination on 100 random masks") {
    ModelConfig cfg;
    cfg.num_blocks = 3;
    cfg.d_model = 5;
    cfg.num_tokens = 2;
    cfg.mlp_hidden = 7;
    cfg.num_classes = 3;
    const std::size_t d = 5, h = 7;
    const std::size_t per_block = d * h + h;

    SeededRng rng(47);
    for (int trial = 0; trial < 100; ++trial) {
        const int L = 1 + static_cast<int>(rng.next_below(3));
        Mask mk;
        mk.L = L;
        const std::size_t total = static_cast<std::size_t>(L) * per_block;
        for (std::size_t j = 0; j < total; ++j)
            if (rng.next_double() < 0.25) mk.selected.push_back(j);
        auto rep = mask_rank_report(mk, cfg);
        REQUIRE(rep.size() == static_cast<std::size_t>(L));
        for (int b = 0; b < L; ++b) {
            Tensor w({d, h});
            std::size_t wsel = 0, all = 0;
            for (std::size_t j : mk.selected) {
                const std::size_t base = static_cast<std::size_t>(b) * per_block;
                if (j < base || j >= base + per_block) continue;
                ++all;
                if (j - base < d * h) {
                    w[j - base] = 1.0;
                    ++wsel;
                }
            }
            const auto bu = static_cast<std::size_t>(b);
            CHECK(rep[bu].selected_count == all);
            CHECK(rep[bu].weight_selected == wsel);
            CHECK(rep[bu].rank == gauss_rank(w));
            CHECK(rep[bu].rank <= static_cast<int>(std::min({wsel, d, h})));
        }
    }
}

TEST_CASE("mbar_agreement: hand example of total disagreement, plus bounds") {
    GradSnapshot g = snap(2, 2, {1.0, 1.0, 1.0, -1.0});
    // variance keeps {0} (sigma 0 vs 2); m_bar keeps {1}: agreement 0.
    CHECK(mbar_agreement(g, {0, 1}) == 0.0);
    CHECK_THROWS_AS(mbar_agreement(g, {}), ValidationError);

    SeededRng rng(48);
    for (int trial = 0; trial < 30; ++trial) {
        const int N = 2 + static_cast<int>(rng.next_below(3));
        const std::size_t m = 4 + rng.next_below(12);
        GradSnapshot h = random_snap(rng, N, m);
        auto step1 = importance_select(h, 0.7);
        if (step1.empty()) continue;
        const double a = mbar_agreement(h, step1);
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
        CHECK(a == mbar_agreement(h, step1));  // deterministic
    }
}

}  // TEST_SUITE
