#include "geowalk/graph.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "geowalk/num_io.hpp"

namespace geowalk {

namespace {

// Past this size the quadratic scan stops being the fast option.
constexpr int kBruteForceLimit = 20000;
constexpr int kVpLeafSize = 8;

using Entry = std::pair<double, int>;  // (distance, index); pair order = tie rule

// Bounded max-heap keeping the k lexicographically smallest entries.
class NeighborQueue {
public:
    explicit NeighborQueue(int k) : k_(static_cast<std::size_t>(k)) {}

    void offer(double d, int idx) {
        if (heap_.size() < k_) {
            heap_.emplace_back(d, idx);
            std::push_heap(heap_.begin(), heap_.end());
        } else if (Entry{d, idx} < heap_.front()) {
            std::pop_heap(heap_.begin(), heap_.end());
            heap_.back() = Entry{d, idx};
            std::push_heap(heap_.begin(), heap_.end());
        }
    }

    bool full() const { return heap_.size() >= k_; }
    // Current pruning radius; anything strictly beyond it cannot enter.
    double tau() const { return full() ? heap_.front().first : std::numeric_limits<double>::infinity(); }

    std::vector<std::pair<int, double>> sorted_result() {
        std::sort(heap_.begin(), heap_.end());
        std::vector<std::pair<int, double>> out;
        out.reserve(heap_.size());
        for (const Entry& e : heap_) out.emplace_back(e.second, e.first);
        return out;
    }

private:
    std::size_t k_;
    std::vector<Entry> heap_;
};

struct VpNode {
    int vantage = -1;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    std::vector<int> bucket;  // leaf payload; internal nodes keep it empty
    bool leaf = false;
};

// Exact vantage-point tree over a geodesic metric.  The vantage of every
// subtree is its smallest member index and the median split uses the full
// (distance, index) order, so the tree shape never depends on how the
// standard library arranges equal elements.
class VpTree {
public:
    VpTree(const std::vector<Point>& points) : points_(points) {
        std::vector<int> items(points.size());
        for (std::size_t i = 0; i < points.size(); ++i) items[i] = static_cast<int>(i);
        root_ = build(std::move(items));
    }

    void query(const Point& q, int self, NeighborQueue& out) const {
        search(root_, q, self, out);
    }

private:
    int build(std::vector<int> items) {
        VpNode node;
        if (static_cast<int>(items.size()) <= kVpLeafSize) {
            node.leaf = true;
            node.bucket = std::move(items);
            nodes_.push_back(std::move(node));
            return static_cast<int>(nodes_.size()) - 1;
        }

        const auto vp_it = std::min_element(items.begin(), items.end());
        node.vantage = *vp_it;
        items.erase(vp_it);

        std::vector<Entry> by_dist;
        by_dist.reserve(items.size());
        for (int idx : items)
            by_dist.emplace_back(distance(node.vantage, idx), idx);
        const std::size_t mid = by_dist.size() / 2;
        std::nth_element(by_dist.begin(), by_dist.begin() + static_cast<std::ptrdiff_t>(mid),
                         by_dist.end());
        node.threshold = by_dist[mid].first;

        std::vector<int> inner, outer;
        inner.reserve(mid);
        outer.reserve(by_dist.size() - mid);
        const Entry& pivot = by_dist[mid];
        for (const Entry& e : by_dist)
            (e < pivot ? inner : outer).push_back(e.second);

        const int self_id = static_cast<int>(nodes_.size());
        nodes_.push_back(std::move(node));
        const int left = inner.empty() ? -1 : build(std::move(inner));
        const int right = outer.empty() ? -1 : build(std::move(outer));
        nodes_[static_cast<std::size_t>(self_id)].left = left;
        nodes_[static_cast<std::size_t>(self_id)].right = right;
        return self_id;
    }

    void search(int id, const Point& q, int self, NeighborQueue& out) const {
        if (id < 0) return;
        const VpNode& node = nodes_[static_cast<std::size_t>(id)];
        if (node.leaf) {
            for (int idx : node.bucket)
                if (idx != self) out.offer(geodesic_distance(q, points_[static_cast<std::size_t>(idx)]), idx);
            return;
        }

        const double d = geodesic_distance(q, points_[static_cast<std::size_t>(node.vantage)]);
        if (node.vantage != self) out.offer(d, node.vantage);

        // Inclusive bounds: a child is skipped only when every point in it is
        // strictly farther than the current worst kept distance, which keeps
        // boundary ties identical to the brute-force result.
        const auto visit_inner = [&] {
            if (std::max(0.0, d - node.threshold) <= out.tau()) search(node.left, q, self, out);
        };
        const auto visit_outer = [&] {
            if (std::max(0.0, node.threshold - d) <= out.tau()) search(node.right, q, self, out);
        };
        if (d < node.threshold) {
            visit_inner();
            visit_outer();
        } else {
            visit_outer();
            visit_inner();
        }
    }

    double distance(int a, int b) const {
        return geodesic_distance(points_[static_cast<std::size_t>(a)],
                                 points_[static_cast<std::size_t>(b)]);
    }

    const std::vector<Point>& points_;
    std::vector<VpNode> nodes_;
    int root_ = -1;
};

}  // namespace

RelationalGraph knn_graph(const std::vector<Point>& points, const ManifoldSpec& spec, int k,
                          KnnMethod method) {
    spec.validate();
    const int n = static_cast<int>(points.size());
    if (n < 2) throw ConfigError("knn_graph: need at least two points, got " + format_int(n));
    if (k < 1) throw ConfigError("knn_graph: k must be positive, got " + format_int(k));
    if (k >= n)
        throw ConfigError("knn_graph: k (" + format_int(k) + ") must be below n (" +
                          format_int(n) + ")");
    for (const Point& p : points) {
        if (!(p.spec == spec))
            throw ValidationError("knn_graph: point does not match the requested manifold spec");
        if (p.coords.size() != points[0].coords.size())
            throw DimensionError("knn_graph: points have inconsistent ambient dimensions");
    }

    RelationalGraph g;
    g.spec = spec;
    g.n = n;
    g.k = k;
    g.neighbors.resize(static_cast<std::size_t>(n));

    const bool brute =
        method == KnnMethod::BruteForce || (method == KnnMethod::Auto && n <= kBruteForceLimit);

    if (brute) {
        std::vector<Entry> dists;
        dists.reserve(static_cast<std::size_t>(n) - 1);
        for (int i = 0; i < n; ++i) {
            dists.clear();
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                dists.emplace_back(geodesic_distance(points[static_cast<std::size_t>(i)],
                                                     points[static_cast<std::size_t>(j)]),
                                   j);
            }
            std::partial_sort(dists.begin(), dists.begin() + k, dists.end());
            auto& row = g.neighbors[static_cast<std::size_t>(i)];
            row.reserve(static_cast<std::size_t>(k));
            for (int j = 0; j < k; ++j)
                row.emplace_back(dists[static_cast<std::size_t>(j)].second,
                                 dists[static_cast<std::size_t>(j)].first);
        }
        return g;
    }

    VpTree tree(points);
    for (int i = 0; i < n; ++i) {
        NeighborQueue queue(k);
        tree.query(points[static_cast<std::size_t>(i)], i, queue);
        g.neighbors[static_cast<std::size_t>(i)] = queue.sorted_result();
    }
    return g;
}

std::size_t undirected_edge_count(const RelationalGraph& g) {
    std::unordered_set<std::uint64_t> pairs;
    pairs.reserve(static_cast<std::size_t>(g.n) * static_cast<std::size_t>(g.k));
    for (int u = 0; u < g.n; ++u) {
        for (const auto& [v, d] : g.neighbors[static_cast<std::size_t>(u)]) {
            const std::uint64_t a = static_cast<std::uint64_t>(std::min(u, v));
            const std::uint64_t b = static_cast<std::uint64_t>(std::max(u, v));
            pairs.insert((a << 32) | b);
        }
    }
    return pairs.size();
}

std::string graph_to_string(const RelationalGraph& g) {
    std::string text = "GEOWALK-GRAPH v1 ";
    text += kind_name(g.spec.kind);
    text += ' ';
    text += format_double(g.spec.curvature);
    text += ' ';
    text += format_int(g.n);
    text += ' ';
    text += format_int(g.k);
    text += '\n';
    for (int i = 0; i < g.n; ++i) {
        text += format_int(i);
        text += ':';
        for (const auto& [idx, dist] : g.neighbors[static_cast<std::size_t>(i)]) {
            text += " (";
            text += format_int(idx);
            text += ',';
            text += format_double(dist);
            text += ')';
        }
        text += '\n';
    }
    return text;
}

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && line[i] == ' ') ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ') ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

}  // namespace

RelationalGraph graph_from_string(const std::string& text, const std::string& source_name) {
    std::vector<std::string_view> lines;
    {
        std::size_t start = 0;
        while (start < text.size()) {
            std::size_t end = text.find('\n', start);
            if (end == std::string::npos) end = text.size();
            lines.push_back(std::string_view(text).substr(start, end - start));
            start = end + 1;
        }
    }
    if (lines.empty()) throw ParseError(source_name + ": empty graph file");

    const auto head = split_ws(lines[0]);
    if (head.size() != 6 || head[0] != "GEOWALK-GRAPH")
        throw ParseError(source_name + ":1: expected header 'GEOWALK-GRAPH v1 <kind> <c> <n> <k>'");
    if (head[1] != "v1")
        throw VersionError(source_name + ":1: unsupported graph format version '" +
                           std::string(head[1]) + "' (this build reads v1)");

    RelationalGraph g;
    g.spec.kind = kind_from_name(std::string(head[2]));
    g.spec.curvature = parse_double(head[3], source_name + ":1");
    g.spec.validate();
    g.n = static_cast<int>(parse_int(head[4], source_name + ":1"));
    g.k = static_cast<int>(parse_int(head[5], source_name + ":1"));
    if (g.n < 2 || g.k < 1 || g.k >= g.n)
        throw ParseError(source_name + ":1: inconsistent n=" + format_int(g.n) +
                         " k=" + format_int(g.k));
    if (static_cast<int>(lines.size()) != g.n + 1)
        throw ParseError(source_name + ": expected " + format_int(g.n) + " node lines, found " +
                         format_int(static_cast<long long>(lines.size()) - 1));

    g.neighbors.resize(static_cast<std::size_t>(g.n));
    for (int i = 0; i < g.n; ++i) {
        const std::string where = source_name + ":" + format_int(i + 2);
        const auto tokens = split_ws(lines[static_cast<std::size_t>(i + 1)]);
        if (tokens.empty() || tokens[0] != format_int(i) + ":")
            throw ParseError(where + ": expected line to start with '" + format_int(i) + ":'");
        if (static_cast<int>(tokens.size()) - 1 != g.k)
            throw ParseError(where + ": expected " + format_int(g.k) + " neighbors, found " +
                             format_int(static_cast<long long>(tokens.size()) - 1));
        auto& row = g.neighbors[static_cast<std::size_t>(i)];
        row.reserve(static_cast<std::size_t>(g.k));
        for (std::size_t t = 1; t < tokens.size(); ++t) {
            std::string_view tok = tokens[t];
            if (tok.size() < 5 || tok.front() != '(' || tok.back() != ')')
                throw ParseError(where + ": token " + format_int(static_cast<long long>(t)) +
                                 " is not of the form (index,distance)");
            tok = tok.substr(1, tok.size() - 2);
            const std::size_t comma = tok.find(',');
            if (comma == std::string_view::npos)
                throw ParseError(where + ": token " + format_int(static_cast<long long>(t)) +
                                 " is missing the comma");
            const int idx = static_cast<int>(parse_int(tok.substr(0, comma), where));
            const double dist = parse_double(tok.substr(comma + 1), where);
            if (idx < 0 || idx >= g.n)
                throw ParseError(where + ": neighbor index " + format_int(idx) +
                                 " outside [0, " + format_int(g.n) + ")");
            if (idx == i) throw ParseError(where + ": self-loop");
            if (!row.empty()) {
                const auto& prev = row.back();
                if (dist < prev.second || (dist == prev.second && idx <= prev.first))
                    throw ParseError(where + ": neighbors out of (distance, index) order");
            }
            row.emplace_back(idx, dist);
        }
    }
    return g;
}

void save_graph(const RelationalGraph& g, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out << graph_to_string(g);
    if (!out) throw Error("write to '" + path.string() + "' failed");
}

RelationalGraph load_graph(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DependencyError("cannot open graph file '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return graph_from_string(ss.str(), path.string());
}

void GraphBundle::validate() const {
    if (euclidean.n != hyperbolic.n || euclidean.n != spherical.n)
        throw ValidationError("graph bundle: node counts disagree (" +
                              format_int(euclidean.n) + ", " + format_int(hyperbolic.n) + ", " +
                              format_int(spherical.n) + ")");
}

GraphBundle build_bundle(const Catalog& catalog, int k, double hyperbolic_c, double spherical_c,
                         KnnMethod method) {
    GraphBundle bundle;
    const ManifoldSpec specs[3] = {ManifoldSpec::euclidean(),
                                   ManifoldSpec::hyperbolic(hyperbolic_c),
                                   ManifoldSpec::spherical(spherical_c)};
    RelationalGraph* out[3] = {&bundle.euclidean, &bundle.hyperbolic, &bundle.spherical};
    for (int s = 0; s < 3; ++s) {
        const auto points = embed_coordinates(catalog, specs[s]);
        *out[s] = knn_graph(points, specs[s], k, method);
    }
    bundle.validate();
    return bundle;
}

}  // namespace geowalk
