#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "geowalk/catalog.hpp"
#include "geowalk/graph.hpp"
#include "geowalk/rng.hpp"

using namespace geowalk;

namespace {

std::vector<Point> euclidean_points_1d(std::initializer_list<double> xs) {
    std::vector<Point> pts;
    for (double x : xs) {
        Eigen::VectorXd v(1);
        v(0) = x;
        pts.push_back(Point{ManifoldSpec::euclidean(), v});
    }
    return pts;
}

std::vector<Point> random_points(Rng& rng, const ManifoldSpec& spec, int n, int dim) {
    std::vector<Point> pts;
    pts.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd w(dim);
        for (int j = 0; j < dim; ++j) w(j) = rng.normal(0.0, 0.8);
        pts.push_back(exp0(spec, w));
    }
    return pts;
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("geowalk_test_" + name);
}

}  // namespace

TEST_CASE("sky directions map to the expected axes") {
    CHECK((celestial_to_vector(0, 0) - Eigen::Vector3d(1, 0, 0)).norm() < 1e-12);
    CHECK((celestial_to_vector(90, 0) - Eigen::Vector3d(0, 1, 0)).norm() < 1e-12);
    CHECK((celestial_to_vector(0, 90) - Eigen::Vector3d(0, 0, 1)).norm() < 1e-12);
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        const double ra = rng.uniform(0.0, 360.0);
        const double dec = rng.uniform(-90.0, 90.0);
        CHECK(std::abs(celestial_to_vector(ra, dec).norm() - 1.0) < 1e-12);
    }
    CHECK_THROWS_AS(celestial_to_vector(360.0, 0.0), ValidationError);
    CHECK_THROWS_AS(celestial_to_vector(-1.0, 0.0), ValidationError);
    CHECK_THROWS_AS(celestial_to_vector(0.0, 91.0), ValidationError);
}

TEST_CASE("coordinate embedding lands on each manifold") {
    Catalog cat;
    cat.ids = {"a", "b", "c"};
    cat.ra = Eigen::Vector3d(0.0, 90.0, 200.0);
    cat.dec = Eigen::Vector3d(0.0, 30.0, -45.0);
    cat.features = Eigen::MatrixXd::Zero(3, 2);

    const auto eucl = embed_coordinates(cat, ManifoldSpec::euclidean());
    CHECK((eucl[0].coords - Eigen::Vector3d(1, 0, 0)).norm() < 1e-12);

    const ManifoldSpec hs = ManifoldSpec::hyperbolic(-1.0);
    const auto hyp = embed_coordinates(cat, hs);
    for (const Point& p : hyp) {
        CHECK(std::abs(lorentz_inner(p.coords, p.coords) + 1.0) <= 1e-9);
        CHECK(p.coords(0) > 0.0);
    }

    const ManifoldSpec ss = ManifoldSpec::spherical(1.0);
    const auto sph = embed_coordinates(cat, ss);
    const Point o = origin(ss, 3);
    for (const Point& p : sph) {
        // unit tangent direction -> geodesic distance exactly 1 from origin
        CHECK(geodesic_distance(o, p) == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(manifold_residual(p) <= 1e-9);
    }
}

TEST_CASE("1-d nearest neighbors with the documented tie rule") {
    const auto pts = euclidean_points_1d({0, 1, 2, 10});
    const RelationalGraph g = knn_graph(pts, ManifoldSpec::euclidean(), 1);
    REQUIRE(g.n == 4);
    CHECK(g.neighbors[0][0].first == 1);
    CHECK(g.neighbors[1][0].first == 0);  // d(1,0)=d(1,2): lower index wins
    CHECK(g.neighbors[2][0].first == 1);
    CHECK(g.neighbors[3][0].first == 2);
    CHECK(g.neighbors[3][0].second == doctest::Approx(8.0).epsilon(1e-15));
}

TEST_CASE("k = n-1 yields the complete graph without self-loops") {
    Rng rng(17);
    const auto pts = random_points(rng, ManifoldSpec::spherical(1.0), 12, 3);
    const RelationalGraph g = knn_graph(pts, ManifoldSpec::spherical(1.0), 11);
    for (int i = 0; i < g.n; ++i) {
        CHECK(static_cast<int>(g.neighbors[static_cast<std::size_t>(i)].size()) == 11);
        std::vector<bool> seen(static_cast<std::size_t>(g.n), false);
        for (const auto& [j, d] : g.neighbors[static_cast<std::size_t>(i)]) {
            CHECK(j != i);
            CHECK(!seen[static_cast<std::size_t>(j)]);
            seen[static_cast<std::size_t>(j)] = true;
            CHECK(d >= 0.0);
        }
    }
}

TEST_CASE("graph construction rejects bad shapes") {
    const auto pts = euclidean_points_1d({0, 1, 2});
    CHECK_THROWS_AS(knn_graph(pts, ManifoldSpec::euclidean(), 3), ConfigError);
    CHECK_THROWS_AS(knn_graph(pts, ManifoldSpec::euclidean(), 0), ConfigError);
    CHECK_THROWS_AS(knn_graph(euclidean_points_1d({0}), ManifoldSpec::euclidean(), 1),
                    ConfigError);
    CHECK_THROWS_AS(knn_graph(pts, ManifoldSpec::spherical(1.0), 1), ValidationError);
}

TEST_CASE("vantage-point tree reproduces brute force exactly") {
    const ManifoldSpec specs[3] = {ManifoldSpec::euclidean(), ManifoldSpec::hyperbolic(-1.0),
                                   ManifoldSpec::spherical(1.0)};
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        Rng rng(1000 + seed);
        for (const auto& spec : specs) {
            const int n = 40 + static_cast<int>(rng.below(140));
            const auto pts = random_points(rng, spec, n, 3);
            for (int k : {1, 5, 17}) {
                if (k >= n) continue;
                const RelationalGraph brute = knn_graph(pts, spec, k, KnnMethod::BruteForce);
                const RelationalGraph tree = knn_graph(pts, spec, k, KnnMethod::VpTree);
                CHECK(brute == tree);  // same indices AND bit-identical distances
            }
        }
    }
}

TEST_CASE("vantage-point tree handles heavy distance ties") {
    // integer grid: almost every query has equidistant candidates
    std::vector<Point> pts;
    for (int x = 0; x < 7; ++x)
        for (int y = 0; y < 7; ++y) {
            Eigen::VectorXd v(2);
            v << x, y;
            pts.push_back(Point{ManifoldSpec::euclidean(), v});
        }
    for (int k : {1, 4, 6, 12}) {
        const RelationalGraph brute = knn_graph(pts, ManifoldSpec::euclidean(), k,
                                                KnnMethod::BruteForce);
        const RelationalGraph tree = knn_graph(pts, ManifoldSpec::euclidean(), k,
                                               KnnMethod::VpTree);
        CHECK(brute == tree);
    }
}

TEST_CASE("graph serialization round-trips bit-exactly") {
    Rng rng(7);
    const ManifoldSpec spec = ManifoldSpec::hyperbolic(-0.7);
    const auto pts = random_points(rng, spec, 60, 3);
    const RelationalGraph g = knn_graph(pts, spec, 5);

    const std::string text = graph_to_string(g);
    CHECK(text == graph_to_string(g));  // deterministic serialization
    const RelationalGraph parsed = graph_from_string(text, "mem");
    CHECK(parsed == g);

    const auto path = temp_file("graph_roundtrip.txt");
    save_graph(g, path);
    CHECK(load_graph(path) == g);
    std::filesystem::remove(path);
}

TEST_CASE("graph parser reports malformed input") {
    CHECK_THROWS_AS(graph_from_string("", "mem"), ParseError);
    CHECK_THROWS_AS(graph_from_string("BOGUS header\n", "mem"), ParseError);
    CHECK_THROWS_AS(graph_from_string("GEOWALK-GRAPH v2 euclidean 0 4 1\n", "mem"),
                    VersionError);
    // wrong neighbor count
    CHECK_THROWS_AS(
        graph_from_string("GEOWALK-GRAPH v1 euclidean 0 2 1\n0: (1,1) (1,2)\n1: (0,1)\n", "mem"),
        ParseError);
    // self-loop
    CHECK_THROWS_AS(
        graph_from_string("GEOWALK-GRAPH v1 euclidean 0 2 1\n0: (0,0)\n1: (0,1)\n", "mem"),
        ParseError);
    // out-of-order distances
    CHECK_THROWS_AS(graph_from_string(
                        "GEOWALK-GRAPH v1 euclidean 0 3 2\n0: (1,2) (2,1)\n1: (0,1) (2,2)\n2: "
                        "(1,1) (0,2)\n",
                        "mem"),
                    ParseError);
    const std::string good =
        "GEOWALK-GRAPH v1 euclidean 0 3 2\n0: (1,1) (2,2)\n1: (0,1) (2,1)\n2: (1,1) (0,2)\n";
    CHECK_NOTHROW(graph_from_string(good, "mem"));
}

TEST_CASE("undirected edge counting collapses mutual pairs") {
    const auto pts = euclidean_points_1d({0, 1, 2, 10});
    const RelationalGraph g = knn_graph(pts, ManifoldSpec::euclidean(), 1);
    // directed: 0->1, 1->0, 2->1, 3->2; unique pairs: {0,1}, {1,2}, {2,3}
    CHECK(undirected_edge_count(g) == 3);
}

TEST_CASE("synthetic catalog is deterministic and validates") {
    SynthConfig cfg;
    cfg.seed = 7;
    cfg.n = 120;
    cfg.n_clusters = 4;
    cfg.depth = 3;
    cfg.feature_dim = 16;
    const SynthResult a = synth_catalog(cfg);
    const SynthResult b = synth_catalog(cfg);
    CHECK(catalog_to_csv(a.catalog) == catalog_to_csv(b.catalog));
    CHECK(targets_to_csv(a.targets) == targets_to_csv(b.targets));

    SynthConfig other = cfg;
    other.seed = 8;
    CHECK(catalog_to_csv(synth_catalog(other).catalog) != catalog_to_csv(a.catalog));

    CHECK_NOTHROW(a.catalog.validate());
    CHECK(a.catalog.size() == 120);
    CHECK(a.catalog.feature_dim() == 16);
    // round-robin assignment keeps the labels balanced
    Eigen::VectorXi counts = Eigen::VectorXi::Zero(4);
    for (int i = 0; i < 120; ++i) counts(a.targets.classes(i))++;
    CHECK(counts.minCoeff() == 30);
    CHECK(counts.maxCoeff() == 30);
}

TEST_CASE("synthetic catalog rejects bad shape parameters") {
    SynthConfig cfg;
    cfg.n = 3;
    cfg.n_clusters = 5;
    CHECK_THROWS_AS(synth_catalog(cfg), ConfigError);
    cfg.n_clusters = 0;
    CHECK_THROWS_AS(synth_catalog(cfg), ConfigError);
    cfg.n_clusters = 2;
    cfg.depth = 0;
    CHECK_THROWS_AS(synth_catalog(cfg), ConfigError);
}

TEST_CASE("single cluster is angularly tighter than two clusters") {
    SynthConfig one;
    one.seed = 11;
    one.n = 80;
    one.n_clusters = 1;
    one.depth = 1;
    one.feature_dim = 4;
    SynthConfig two = one;
    two.n_clusters = 2;

    const auto mean_pairwise = [](const Catalog& cat) {
        const auto pts = embed_coordinates(cat, ManifoldSpec::spherical(1.0));
        double total = 0.0;
        int count = 0;
        for (std::size_t i = 0; i < pts.size(); ++i)
            for (std::size_t j = i + 1; j < pts.size(); ++j) {
                total += geodesic_distance(pts[i], pts[j]);
                ++count;
            }
        return total / count;
    };
    CHECK(mean_pairwise(synth_catalog(one).catalog) <
          mean_pairwise(synth_catalog(two).catalog));
}

TEST_CASE("catalog and target CSV round trips preserve every bit") {
    SynthConfig cfg;
    cfg.seed = 3;
    cfg.n = 40;
    cfg.n_clusters = 3;
    cfg.depth = 2;
    cfg.feature_dim = 8;
    const SynthResult synth = synth_catalog(cfg);

    const auto cat_path = temp_file("catalog.csv");
    const auto tgt_path = temp_file("targets.csv");
    save_catalog(synth.catalog, cat_path);
    save_targets(synth.targets, tgt_path);

    const Catalog loaded = load_catalog(cat_path);
    CHECK(loaded.ids == synth.catalog.ids);
    CHECK(loaded.ra == synth.catalog.ra);
    CHECK(loaded.dec == synth.catalog.dec);
    CHECK(loaded.features == synth.catalog.features);

    const Targets tgts = load_targets(tgt_path);
    CHECK(tgts.ids == synth.targets.ids);
    CHECK(tgts.regression == synth.targets.regression);
    CHECK(tgts.classes == synth.targets.classes);

    // and saving the loaded copy reproduces the original bytes
    CHECK(catalog_to_csv(loaded) == catalog_to_csv(synth.catalog));
    std::filesystem::remove(cat_path);
    std::filesystem::remove(tgt_path);
}

TEST_CASE("catalog validation catches duplicates and bad ranges") {
    Catalog cat;
    cat.ids = {"x", "x"};
    cat.ra = Eigen::Vector2d(0.0, 10.0);
    cat.dec = Eigen::Vector2d(0.0, 10.0);
    cat.features = Eigen::MatrixXd::Zero(2, 2);
    CHECK_THROWS_AS(cat.validate(), ValidationError);
    cat.ids = {"x", "y"};
    CHECK_NOTHROW(cat.validate());
    cat.dec(1) = 95.0;
    CHECK_THROWS_AS(cat.validate(), ValidationError);
}

TEST_CASE("spherical knn matches a direct angular-separation oracle") {
    SynthConfig cfg;
    cfg.seed = 23;
    cfg.n = 90;
    cfg.n_clusters = 3;
    cfg.depth = 2;
    cfg.feature_dim = 4;
    const Catalog cat = synth_catalog(cfg).catalog;

    const ManifoldSpec spec = ManifoldSpec::spherical(1.0);
    const RelationalGraph g = knn_graph(embed_coordinates(cat, spec), spec, 7);

    // oracle: angular separation of the raw unit direction vectors
    std::vector<Eigen::Vector3d> dirs;
    for (int i = 0; i < cat.size(); ++i)
        dirs.push_back(celestial_to_vector(cat.ra(i), cat.dec(i)));
    for (int i = 0; i < cat.size(); ++i) {
        std::vector<std::pair<double, int>> ang;
        for (int j = 0; j < cat.size(); ++j) {
            if (j == i) continue;
            const double cs = std::clamp(dirs[static_cast<std::size_t>(i)]
                                             .dot(dirs[static_cast<std::size_t>(j)]),
                                         -1.0, 1.0);
            ang.emplace_back(std::acos(cs), j);
        }
        std::sort(ang.begin(), ang.end());
        for (int t = 0; t < 7; ++t)
            CHECK(g.neighbors[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)].first ==
                  ang[static_cast<std::size_t>(t)].second);
    }
}

TEST_CASE("bundle construction shares node count across geometries") {
    SynthConfig cfg;
    cfg.seed = 7;
    cfg.n = 50;
    cfg.n_clusters = 2;
    cfg.depth = 2;
    cfg.feature_dim = 4;
    const Catalog cat = synth_catalog(cfg).catalog;
    const GraphBundle bundle = build_bundle(cat, 5);
    CHECK_NOTHROW(bundle.validate());
    CHECK(bundle.euclidean.n == 50);
    CHECK(bundle.hyperbolic.n == 50);
    CHECK(bundle.spherical.n == 50);
    for (const auto* g : {&bundle.euclidean, &bundle.hyperbolic, &bundle.spherical})
        for (const auto& row : g->neighbors)
            CHECK(row.size() == 5);
}
