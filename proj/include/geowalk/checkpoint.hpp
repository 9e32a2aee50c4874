#ifndef GEOWALK_CHECKPOINT_HPP
#define GEOWALK_CHECKPOINT_HPP

#include <filesystem>
#include <string>

#include "geowalk/backbone.hpp"
#include "geowalk/sage.hpp"

// JSON checkpoint container ("GEOWALK-CKPT", version 1).  Weights are stored
// as shortest round-trip decimals with alphabetically ordered keys, so saving
// the same state twice produces identical bytes and a save/load cycle
// reproduces every float exactly.

namespace geowalk {

// The three trained prompt encoders plus their read-outs and the shared
// feature scaler each carries.  Training precision is float throughout.
struct Stage1Bundle {
    Stage1Result<float> euclidean, hyperbolic, spherical;

    Stage1Result<float>& get(Kind kind) {
        switch (kind) {
            case Kind::Euclidean: return euclidean;
            case Kind::Hyperbolic: return hyperbolic;
            case Kind::Spherical: return spherical;
        }
        return euclidean;
    }
    const Stage1Result<float>& get(Kind kind) const {
        return const_cast<Stage1Bundle*>(this)->get(kind);
    }
};

std::string stage1_to_json(const Stage1Bundle& bundle);
// `source` names the file/stream in parse errors.
Stage1Bundle stage1_from_json(const std::string& text, const std::string& source);
void save_stage1(const Stage1Bundle& bundle, const std::filesystem::path& path);
Stage1Bundle load_stage1(const std::filesystem::path& path);  // DependencyError if absent

std::string backbone_to_json(const BackboneParams<float>& params);
BackboneParams<float> backbone_from_json(const std::string& text, const std::string& source);
void save_backbone(const BackboneParams<float>& params, const std::filesystem::path& path);
BackboneParams<float> load_backbone(const std::filesystem::path& path);

// Shared text-file helpers for the artifact formats.
std::string read_text_file(const std::filesystem::path& path, const char* what);
void write_text_file(const std::filesystem::path& path, const std::string& content);

}  // namespace geowalk

#endif
