#ifndef GEOWALK_CATALOG_HPP
#define GEOWALK_CATALOG_HPP

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "geowalk/error.hpp"
#include "geowalk/manifold.hpp"

namespace geowalk {

// Object table: sky position plus a feature vector per object.
struct Catalog {
    std::vector<std::string> ids;
    Eigen::VectorXd ra;           // degrees, [0, 360)
    Eigen::VectorXd dec;          // degrees, [-90, 90]
    Eigen::MatrixXd features;     // n x d

    int size() const { return static_cast<int>(ids.size()); }
    int feature_dim() const { return static_cast<int>(features.cols()); }
    void validate() const;  // throws ValidationError
};

struct Targets {
    std::vector<std::string> ids;
    Eigen::VectorXd regression;   // continuous target per object
    Eigen::VectorXi classes;      // top-level cluster label per object

    int size() const { return static_cast<int>(ids.size()); }
    int n_classes() const { return classes.size() ? classes.maxCoeff() + 1 : 0; }
};

// (cos dec cos ra, cos dec sin ra, sin dec); degrees in, unit vector out.
Eigen::Vector3d celestial_to_vector(double ra_deg, double dec_deg);

// Carry each object's direction vector onto the target geometry: treated as
// a tangent vector at the origin and exp-mapped for curved specs, returned
// as-is for the flat one.
std::vector<Point> embed_coordinates(const Catalog& catalog, const ManifoldSpec& spec);

struct SynthConfig {
    std::uint64_t seed = 7;
    int n = 2000;
    int n_clusters = 4;
    int depth = 3;
    int feature_dim = 1024;
};

struct SynthResult {
    Catalog catalog;
    Targets targets;
};

// Hierarchical cluster tree on the sky: n_clusters top-level clusters whose
// members are recursively grouped into sub-clusters of shrinking angular
// size.  Top-level clusters alternate between the full tree depth and a
// single level, so the label set splits into hierarchy-dominant and flat
// populations (even labels are the deep ones).  Features sum the signature
// vectors of the tree path plus heavy per-object noise; the regression
// target sums the path's scalar values plus a smooth declination term.
SynthResult synth_catalog(const SynthConfig& cfg);

// Whether a class label belongs to a hierarchy-dominant (deep) top-level
// cluster under the synth convention above.
inline bool hierarchy_dominant_class(int class_label) { return class_label % 2 == 0; }

// CSV persistence.  Headers: `id,ra,dec,f0..f{d-1}` and
// `id,regression_target,class_target`.  Numbers are shortest round-trip
// decimals, so save/load is lossless and byte-deterministic.
void save_catalog(const Catalog& catalog, const std::filesystem::path& path);
Catalog load_catalog(const std::filesystem::path& path);
void save_targets(const Targets& targets, const std::filesystem::path& path);
Targets load_targets(const std::filesystem::path& path);

std::string catalog_to_csv(const Catalog& catalog);
std::string targets_to_csv(const Targets& targets);

}  // namespace geowalk

#endif
