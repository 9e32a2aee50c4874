#ifndef GEOWALK_GRAPH_HPP
#define GEOWALK_GRAPH_HPP

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "geowalk/catalog.hpp"
#include "geowalk/manifold.hpp"

namespace geowalk {

// Directed k-nearest-neighbor adjacency under one geometry's geodesic
// distance.  Neighbor lists are sorted by (distance, index); ties always go
// to the lower index so results are platform-independent.
struct RelationalGraph {
    ManifoldSpec spec;
    int n = 0;
    int k = 0;
    std::vector<std::vector<std::pair<int, double>>> neighbors;

    bool operator==(const RelationalGraph& o) const {
        return spec == o.spec && n == o.n && k == o.k && neighbors == o.neighbors;
    }
};

enum class KnnMethod {
    Auto,        // brute force up to 20k points, vantage-point tree beyond
    BruteForce,  // always O(n^2)
    VpTree,      // always the tree; prunes with the triangle inequality, stays exact
};

RelationalGraph knn_graph(const std::vector<Point>& points, const ManifoldSpec& spec, int k,
                          KnnMethod method = KnnMethod::Auto);

// Number of distinct unordered pairs covered by the directed lists.
std::size_t undirected_edge_count(const RelationalGraph& g);

// Versioned text format: header `GEOWALK-GRAPH v1 <kind> <c> <n> <k>`, then
// one `<node>: (<neighbor>,<distance>) ...` line per node with shortest
// round-trip decimals, making the round trip bit-exact.
std::string graph_to_string(const RelationalGraph& g);
RelationalGraph graph_from_string(const std::string& text, const std::string& source_name);
void save_graph(const RelationalGraph& g, const std::filesystem::path& path);
RelationalGraph load_graph(const std::filesystem::path& path);

// The three per-geometry graphs over one catalog.
struct GraphBundle {
    RelationalGraph euclidean;
    RelationalGraph hyperbolic;
    RelationalGraph spherical;

    const RelationalGraph& get(Kind kind) const {
        switch (kind) {
            case Kind::Euclidean: return euclidean;
            case Kind::Hyperbolic: return hyperbolic;
            case Kind::Spherical: return spherical;
        }
        return euclidean;
    }
    void validate() const;  // identical n across the three graphs
};

GraphBundle build_bundle(const Catalog& catalog, int k, double hyperbolic_c = -1.0,
                         double spherical_c = 1.0, KnnMethod method = KnnMethod::Auto);

}  // namespace geowalk

#endif
