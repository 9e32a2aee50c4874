#include "geowalk/catalog.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "geowalk/num_io.hpp"
#include "geowalk/rng.hpp"

namespace geowalk {

namespace {

constexpr double kDegToRad = kPi / 180.0;

void check_coord_ranges(double ra, double dec, const std::string& where) {
    if (!(ra >= 0.0 && ra < 360.0))
        throw ValidationError(where + ": right ascension " + format_double(ra) +
                              " outside [0, 360)");
    if (!(dec >= -90.0 && dec <= 90.0))
        throw ValidationError(where + ": declination " + format_double(dec) +
                              " outside [-90, 90]");
}

// Split a CSV line; the format never quotes fields.
std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DependencyError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw Error("write to '" + path.string() + "' failed");
}

// Orthonormal basis of the plane tangent to the unit sphere at v.
void sky_tangent_basis(const Eigen::Vector3d& v, Eigen::Vector3d& u1, Eigen::Vector3d& u2) {
    Eigen::Vector3d ref = std::abs(v.z()) < 0.9 ? Eigen::Vector3d::UnitZ()
                                                : Eigen::Vector3d::UnitX();
    u1 = ref.cross(v).normalized();
    u2 = v.cross(u1);
}

Eigen::Vector3d jitter_direction(const Eigen::Vector3d& center, double sigma_rad, Rng& rng) {
    Eigen::Vector3d u1, u2;
    sky_tangent_basis(center, u1, u2);
    const double a = rng.normal(0.0, sigma_rad);
    const double b = rng.normal(0.0, sigma_rad);
    return (center + a * u1 + b * u2).normalized();
}

void direction_to_celestial(const Eigen::Vector3d& v, double& ra_deg, double& dec_deg) {
    double ra = std::atan2(v.y(), v.x()) / kDegToRad;
    if (ra < 0.0) ra += 360.0;
    if (ra >= 360.0) ra = 0.0;
    const double dec = std::asin(std::clamp(v.z(), -1.0, 1.0)) / kDegToRad;
    ra_deg = ra;
    dec_deg = dec;
}

// One node of the synthetic cluster tree.
struct TreeNode {
    Eigen::Vector3d center;
    Eigen::VectorXd signature;  // added to member features
    double value = 0.0;         // added to member regression targets
    std::vector<int> children;  // indices into the node pool
};

}  // namespace

void Catalog::validate() const {
    const int n = size();
    if (n < 1) throw ValidationError("catalog: needs at least one object");
    if (ra.size() != n || dec.size() != n || features.rows() != n)
        throw ValidationError("catalog: column lengths disagree (ids " + format_int(n) +
                              ", ra " + format_int(ra.size()) + ", dec " +
                              format_int(dec.size()) + ", features " +
                              format_int(features.rows()) + ")");
    if (features.cols() < 1) throw ValidationError("catalog: feature dimension must be >= 1");
    std::unordered_set<std::string> seen;
    seen.reserve(ids.size());
    for (int i = 0; i < n; ++i) {
        if (ids[static_cast<std::size_t>(i)].empty())
            throw ValidationError("catalog: empty id at row " + format_int(i));
        if (!seen.insert(ids[static_cast<std::size_t>(i)]).second)
            throw ValidationError("catalog: duplicate id '" + ids[static_cast<std::size_t>(i)] +
                                  "'");
        check_coord_ranges(ra(i), dec(i), "catalog row " + format_int(i));
    }
}

Eigen::Vector3d celestial_to_vector(double ra_deg, double dec_deg) {
    check_coord_ranges(ra_deg, dec_deg, "celestial_to_vector");
    const double ra = ra_deg * kDegToRad;
    const double dec = dec_deg * kDegToRad;
    return {std::cos(dec) * std::cos(ra), std::cos(dec) * std::sin(ra), std::sin(dec)};
}

std::vector<Point> embed_coordinates(const Catalog& catalog, const ManifoldSpec& spec) {
    catalog.validate();
    spec.validate();
    const int n = catalog.size();
    std::vector<Point> out;
    out.reserve(static_cast<std::size_t>(n));
    const Point base = origin(spec, 3);
    for (int i = 0; i < n; ++i) {
        const Eigen::Vector3d v = celestial_to_vector(catalog.ra(i), catalog.dec(i));
        if (!spec.curved()) {
            out.push_back(Point{spec, v});
            continue;
        }
        Eigen::VectorXd ambient = Eigen::VectorXd::Zero(4);
        ambient.tail(3) = v;
        out.push_back(exp_map(project_to_tangent(base, ambient)));
    }
    return out;
}

SynthResult synth_catalog(const SynthConfig& cfg) {
    if (cfg.n_clusters < 1)
        throw ConfigError("synth_catalog: n_clusters must be >= 1, got " +
                          format_int(cfg.n_clusters));
    if (cfg.n < cfg.n_clusters)
        throw ConfigError("synth_catalog: n (" + format_int(cfg.n) +
                          ") must be >= n_clusters (" + format_int(cfg.n_clusters) + ")");
    if (cfg.depth < 1)
        throw ConfigError("synth_catalog: depth must be >= 1, got " + format_int(cfg.depth));
    if (cfg.feature_dim < 1)
        throw ConfigError("synth_catalog: feature_dim must be >= 1, got " +
                          format_int(cfg.feature_dim));

    Rng rng(cfg.seed);
    Rng tree_rng = rng.fork(0x7265656eull);
    Rng assign_rng = rng.fork(0x61737369ull);
    Rng noise_rng = rng.fork(0x6e6f6973ull);

    // Angular scales per tree level; leaves of the deepest level still
    // subtend a few degrees so k-NN neighborhoods stay within a sub-cluster.
    const double top_radius = 16.0 * kDegToRad;
    const double level_ratio = 0.34;
    const int branching = 3;

    std::vector<TreeNode> pool;
    std::vector<int> roots;

    auto make_node = [&](const Eigen::Vector3d& center) {
        TreeNode node;
        node.center = center;
        node.signature = Eigen::VectorXd(cfg.feature_dim);
        for (int j = 0; j < cfg.feature_dim; ++j) node.signature(j) = tree_rng.normal();
        node.value = tree_rng.normal(0.0, 1.0);
        pool.push_back(std::move(node));
        return static_cast<int>(pool.size()) - 1;
    };

    // Top-level centers on a Fibonacci lattice, away from the poles so the
    // cluster disks stay inside the declination range.
    const double golden = kPi * (3.0 - std::sqrt(5.0));
    for (int tc = 0; tc < cfg.n_clusters; ++tc) {
        const double z = 0.9 * (2.0 * (tc + 0.5) / cfg.n_clusters - 1.0);
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden * tc;
        Eigen::Vector3d center(r * std::cos(phi), r * std::sin(phi), z);
        roots.push_back(make_node(center));
    }

    // Grow sub-clusters below the hierarchy-dominant (even-label) roots.
    for (int tc = 0; tc < cfg.n_clusters; ++tc) {
        const int levels = hierarchy_dominant_class(tc) ? cfg.depth : 1;
        std::vector<int> frontier = {roots[static_cast<std::size_t>(tc)]};
        double scale = top_radius;
        for (int level = 1; level < levels; ++level) {
            scale *= level_ratio;
            std::vector<int> next;
            for (int parent : frontier) {
                for (int b = 0; b < branching; ++b) {
                    const Eigen::Vector3d child_center =
                        jitter_direction(pool[static_cast<std::size_t>(parent)].center,
                                         scale, tree_rng);
                    const int child = make_node(child_center);
                    pool[static_cast<std::size_t>(parent)].children.push_back(child);
                    next.push_back(child);
                }
            }
            frontier = std::move(next);
        }
    }

    SynthResult out;
    out.catalog.ids.resize(static_cast<std::size_t>(cfg.n));
    out.catalog.ra.resize(cfg.n);
    out.catalog.dec.resize(cfg.n);
    out.catalog.features.resize(cfg.n, cfg.feature_dim);
    out.targets.ids.resize(static_cast<std::size_t>(cfg.n));
    out.targets.regression.resize(cfg.n);
    out.targets.classes.resize(cfg.n);

    const double feature_noise = 1.5;  // per-entry, vs unit-scale signatures
    const double target_noise = 0.05;

    for (int i = 0; i < cfg.n; ++i) {
        const int label = i % cfg.n_clusters;  // round-robin keeps classes balanced
        const int levels = hierarchy_dominant_class(label) ? cfg.depth : 1;

        // Walk from the root to a leaf, accumulating path contributions.
        int node = roots[static_cast<std::size_t>(label)];
        Eigen::VectorXd feat = pool[static_cast<std::size_t>(node)].signature;
        double target = pool[static_cast<std::size_t>(node)].value;
        double scale = top_radius;
        for (int level = 1; level < levels; ++level) {
            scale *= level_ratio;
            const auto& kids = pool[static_cast<std::size_t>(node)].children;
            node = kids[static_cast<std::size_t>(assign_rng.below(kids.size()))];
            feat += pool[static_cast<std::size_t>(node)].signature;
            target += pool[static_cast<std::size_t>(node)].value;
        }

        const Eigen::Vector3d dir =
            jitter_direction(pool[static_cast<std::size_t>(node)].center, 0.45 * scale,
                             assign_rng);
        double ra_deg = 0.0, dec_deg = 0.0;
        direction_to_celestial(dir, ra_deg, dec_deg);

        for (int j = 0; j < cfg.feature_dim; ++j)
            feat(j) += noise_rng.normal(0.0, feature_noise);
        target += 0.3 * std::sin(dec_deg * kDegToRad) + noise_rng.normal(0.0, target_noise);

        char idbuf[24];
        std::snprintf(idbuf, sizeof(idbuf), "obj-%06d", i);
        out.catalog.ids[static_cast<std::size_t>(i)] = idbuf;
        out.catalog.ra(i) = ra_deg;
        out.catalog.dec(i) = dec_deg;
        out.catalog.features.row(i) = feat.transpose();
        out.targets.ids[static_cast<std::size_t>(i)] = idbuf;
        out.targets.regression(i) = target;
        out.targets.classes(i) = label;
    }

    out.catalog.validate();
    return out;
}

std::string catalog_to_csv(const Catalog& catalog) {
    catalog.validate();
    std::string text = "id,ra,dec";
    for (int j = 0; j < catalog.feature_dim(); ++j) text += ",f" + format_int(j);
    text += "\n";
    for (int i = 0; i < catalog.size(); ++i) {
        text += catalog.ids[static_cast<std::size_t>(i)];
        text += ',';
        text += format_double(catalog.ra(i));
        text += ',';
        text += format_double(catalog.dec(i));
        for (int j = 0; j < catalog.feature_dim(); ++j) {
            text += ',';
            text += format_double(catalog.features(i, j));
        }
        text += '\n';
    }
    return text;
}

std::string targets_to_csv(const Targets& targets) {
    std::string text = "id,regression_target,class_target\n";
    for (int i = 0; i < targets.size(); ++i) {
        text += targets.ids[static_cast<std::size_t>(i)];
        text += ',';
        text += format_double(targets.regression(i));
        text += ',';
        text += format_int(targets.classes(i));
        text += '\n';
    }
    return text;
}

void save_catalog(const Catalog& catalog, const std::filesystem::path& path) {
    write_text_file(path, catalog_to_csv(catalog));
}

void save_targets(const Targets& targets, const std::filesystem::path& path) {
    write_text_file(path, targets_to_csv(targets));
}

namespace {

std::vector<std::string_view> split_lines(const std::string& text) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        lines.push_back(std::string_view(text).substr(start, end - start));
        start = end + 1;
    }
    return lines;
}

}  // namespace

Catalog load_catalog(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    const auto lines = split_lines(text);
    if (lines.empty()) throw ParseError(path.string() + ": empty catalog file");

    const auto header = split_csv(lines[0]);
    if (header.size() < 4 || header[0] != "id" || header[1] != "ra" || header[2] != "dec")
        throw ParseError(path.string() + ":1: expected header id,ra,dec,f0,...");
    const int dim = static_cast<int>(header.size()) - 3;
    for (int j = 0; j < dim; ++j) {
        if (header[static_cast<std::size_t>(j + 3)] != "f" + format_int(j))
            throw ParseError(path.string() + ":1: feature column " + format_int(j + 3) +
                             " should be named f" + format_int(j));
    }

    const int n = static_cast<int>(lines.size()) - 1;
    if (n < 1) throw ParseError(path.string() + ": catalog has no data rows");
    Catalog cat;
    cat.ids.resize(static_cast<std::size_t>(n));
    cat.ra.resize(n);
    cat.dec.resize(n);
    cat.features.resize(n, dim);
    for (int i = 0; i < n; ++i) {
        const std::string where = path.string() + ":" + format_int(i + 2);
        const auto cells = split_csv(lines[static_cast<std::size_t>(i + 1)]);
        if (static_cast<int>(cells.size()) != dim + 3)
            throw ParseError(where + ": expected " + format_int(dim + 3) + " columns, found " +
                             format_int(static_cast<long long>(cells.size())));
        cat.ids[static_cast<std::size_t>(i)] = std::string(cells[0]);
        cat.ra(i) = parse_double(cells[1], where);
        cat.dec(i) = parse_double(cells[2], where);
        for (int j = 0; j < dim; ++j)
            cat.features(i, j) = parse_double(cells[static_cast<std::size_t>(j + 3)], where);
    }
    cat.validate();
    return cat;
}

Targets load_targets(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    const auto lines = split_lines(text);
    if (lines.empty()) throw ParseError(path.string() + ": empty targets file");
    if (lines[0] != "id,regression_target,class_target")
        throw ParseError(path.string() + ":1: expected header id,regression_target,class_target");
    const int n = static_cast<int>(lines.size()) - 1;
    if (n < 1) throw ParseError(path.string() + ": targets file has no data rows");
    Targets t;
    t.ids.resize(static_cast<std::size_t>(n));
    t.regression.resize(n);
    t.classes.resize(n);
    for (int i = 0; i < n; ++i) {
        const std::string where = path.string() + ":" + format_int(i + 2);
        const auto cells = split_csv(lines[static_cast<std::size_t>(i + 1)]);
        if (cells.size() != 3) throw ParseError(where + ": expected 3 columns");
        t.ids[static_cast<std::size_t>(i)] = std::string(cells[0]);
        t.regression(i) = parse_double(cells[1], where);
        const long long cls = parse_int(cells[2], where);
        if (cls < 0) throw ParseError(where + ": negative class label");
        t.classes(i) = static_cast<int>(cls);
    }
    return t;
}

}  // namespace geowalk
