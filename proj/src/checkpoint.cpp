#include "geowalk/checkpoint.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace geowalk {

namespace {

using nlohmann::json;

constexpr const char* kFormat = "GEOWALK-CKPT";
constexpr int kVersion = 1;

json mat_to_json(const ad::Mat<float>& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            row.push_back(static_cast<double>(m(i, j)));  // widening is exact
        rows.push_back(std::move(row));
    }
    return rows;
}

ad::Mat<float> mat_from_json(const json& j, const std::string& where) {
    if (!j.is_array() || j.empty() || !j[0].is_array())
        throw ParseError(where + ": expected a nested array of rows");
    const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
    const Eigen::Index cols = static_cast<Eigen::Index>(j[0].size());
    ad::Mat<float> m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const json& row = j[static_cast<std::size_t>(i)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
            throw ParseError(where + ": ragged rows");
        for (Eigen::Index j2 = 0; j2 < cols; ++j2) {
            const json& v = row[static_cast<std::size_t>(j2)];
            if (!v.is_number()) throw ParseError(where + ": non-numeric entry");
            m(i, j2) = static_cast<float>(v.get<double>());
        }
    }
    return m;
}

ad::Activation parse_activation(const std::string& s, const std::string& where) {
    try {
        return ad::activation_from_name(s);
    } catch (const ValidationError&) {
        throw ParseError(where + ": unknown activation '" + s + "'");
    }
}

Kind parse_kind(const std::string& s, const std::string& where) {
    try {
        return kind_from_name(s);
    } catch (const ValidationError&) {
        throw ParseError(where + ": unknown geometry '" + s + "'");
    }
}

// Fetches a key or fails with its JSON path spelled out.
const json& need(const json& j, const char* key, const std::string& where) {
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(where + ": missing key '" + key + "'");
    return *it;
}

json layer_to_json(const SageLayerParams<float>& p) {
    json j;
    j["activation"] = ad::activation_name(p.activation);
    j["w_self"] = mat_to_json(p.w_self);
    j["w_neigh"] = mat_to_json(p.w_neigh);
    j["bias"] = mat_to_json(p.bias);
    return j;
}

SageLayerParams<float> layer_from_json(const json& j, const std::string& where) {
    SageLayerParams<float> p;
    p.activation =
        parse_activation(need(j, "activation", where).get<std::string>(), where);
    p.w_self = mat_from_json(need(j, "w_self", where), where + ".w_self");
    p.w_neigh = mat_from_json(need(j, "w_neigh", where), where + ".w_neigh");
    p.bias = mat_from_json(need(j, "bias", where), where + ".bias");
    p.validate();
    return p;
}

json encoder_to_json(const Stage1Result<float>& r) {
    json j;
    j["spec"] = {{"kind", kind_name(r.encoder.spec.kind)},
                 {"curvature", r.encoder.spec.curvature}};
    j["layer1"] = layer_to_json(r.encoder.layer1);
    j["layer2"] = layer_to_json(r.encoder.layer2);
    j["readout_w"] = mat_to_json(r.readout_w);
    j["readout_b"] = mat_to_json(r.readout_b);
    j["feature_mean"] = mat_to_json(r.feature_mean);
    j["feature_scale"] = mat_to_json(r.feature_scale);
    return j;
}

Stage1Result<float> encoder_from_json(const json& j, const std::string& where) {
    Stage1Result<float> r;
    const json& spec = need(j, "spec", where);
    r.encoder.spec.kind =
        parse_kind(need(spec, "kind", where).get<std::string>(), where);
    r.encoder.spec.curvature = need(spec, "curvature", where).get<double>();
    r.encoder.spec.validate();
    r.encoder.layer1 = layer_from_json(need(j, "layer1", where), where + ".layer1");
    r.encoder.layer2 = layer_from_json(need(j, "layer2", where), where + ".layer2");
    r.encoder.validate();
    r.readout_w = mat_from_json(need(j, "readout_w", where), where + ".readout_w");
    r.readout_b = mat_from_json(need(j, "readout_b", where), where + ".readout_b");
    r.feature_mean = mat_from_json(need(j, "feature_mean", where), where + ".feature_mean");
    r.feature_scale =
        mat_from_json(need(j, "feature_scale", where), where + ".feature_scale");
    return r;
}

json parse_container(const std::string& text, const std::string& source,
                     const char* expected_kind) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(source + ": not valid JSON (" + e.what() + ")");
    }
    if (!j.is_object() || need(j, "format", source).get<std::string>() != kFormat)
        throw ParseError(source + ": not a " + std::string(kFormat) + " container");
    const int version = need(j, "version", source).get<int>();
    if (version != kVersion)
        throw VersionError(source + ": checkpoint version " + format_int(version) +
                           " is not supported (this build reads version " +
                           format_int(kVersion) + ")");
    const std::string kind = need(j, "kind", source).get<std::string>();
    if (kind != expected_kind)
        throw ParseError(source + ": checkpoint holds '" + kind + "', expected '" +
                         expected_kind + "'");
    return j;
}

}  // namespace

std::string read_text_file(const std::filesystem::path& path, const char* what) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DependencyError(std::string("missing ") + what + ": " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << content;
    if (!out) throw Error("failed writing " + path.string());
}

std::string stage1_to_json(const Stage1Bundle& bundle) {
    json j;
    j["format"] = kFormat;
    j["version"] = kVersion;
    j["kind"] = "stage1-bundle";
    json geoms;
    geoms["euclidean"] = encoder_to_json(bundle.euclidean);
    geoms["hyperbolic"] = encoder_to_json(bundle.hyperbolic);
    geoms["spherical"] = encoder_to_json(bundle.spherical);
    j["geometries"] = std::move(geoms);
    return j.dump() + "\n";
}

Stage1Bundle stage1_from_json(const std::string& text, const std::string& source) {
    try {
        const json j = parse_container(text, source, "stage1-bundle");
        const json& geoms = need(j, "geometries", source);
        Stage1Bundle out;
        out.euclidean =
            encoder_from_json(need(geoms, "euclidean", source), source + ".euclidean");
        out.hyperbolic =
            encoder_from_json(need(geoms, "hyperbolic", source), source + ".hyperbolic");
        out.spherical =
            encoder_from_json(need(geoms, "spherical", source), source + ".spherical");
        if (out.euclidean.encoder.spec.kind != Kind::Euclidean ||
            out.hyperbolic.encoder.spec.kind != Kind::Hyperbolic ||
            out.spherical.encoder.spec.kind != Kind::Spherical)
            throw ParseError(source + ": geometry slots disagree with their specs");
        return out;
    } catch (const json::exception& e) {
        throw ParseError(source + ": malformed checkpoint (" + e.what() + ")");
    }
}

void save_stage1(const Stage1Bundle& bundle, const std::filesystem::path& path) {
    write_text_file(path, stage1_to_json(bundle));
}

Stage1Bundle load_stage1(const std::filesystem::path& path) {
    return stage1_from_json(read_text_file(path, "stage-1 checkpoint"), path.string());
}

std::string backbone_to_json(const BackboneParams<float>& params) {
    params.validate();
    json j;
    j["format"] = kFormat;
    j["version"] = kVersion;
    j["kind"] = "backbone";
    j["config"] = {{"layers", params.config.layers},
                   {"model_dim", params.config.model_dim},
                   {"heads", params.config.heads},
                   {"adapter_period", params.config.adapter_period},
                   {"vocab", params.config.vocab},
                   {"ffn_hidden", params.config.ffn_hidden},
                   {"adapter_hidden", params.config.adapter_hidden}};
    json dims = json::array();
    for (const auto& pi : params.projection.pi) dims.push_back(static_cast<int>(pi.cols()));
    j["modal_dims"] = std::move(dims);
    bool flat = false;
    json adapters = json::object();
    for (std::size_t i = 0; i < params.blocks.size(); ++i) {
        if (!params.blocks[i].has_adapter) continue;
        const AdapterBlock<float>& a = params.blocks[i].adapter;
        flat = a.flat_control;  // uniform across blocks by construction
        adapters["block" + format_int(static_cast<long long>(i) + 1)] = {
            {"temperature", a.gate.temperature},
            {"activation", ad::activation_name(a.euclidean.activation)}};
    }
    j["flat_experts"] = flat;
    j["adapters"] = std::move(adapters);
    json tensors;
    visit_backbone(params, [&tensors](const std::string& name, const ad::Mat<float>& m,
                                      bool, bool) {
        tensors[name] = mat_to_json(m);
        return 0;
    });
    j["tensors"] = std::move(tensors);
    return j.dump() + "\n";
}

BackboneParams<float> backbone_from_json(const std::string& text, const std::string& source) {
  try {
    const json j = parse_container(text, source, "backbone");
    const json& cfg_j = need(j, "config", source);
    BackboneConfig cfg;
    cfg.layers = need(cfg_j, "layers", source).get<int>();
    cfg.model_dim = need(cfg_j, "model_dim", source).get<int>();
    cfg.heads = need(cfg_j, "heads", source).get<int>();
    cfg.adapter_period = need(cfg_j, "adapter_period", source).get<int>();
    cfg.vocab = need(cfg_j, "vocab", source).get<int>();
    cfg.ffn_hidden = need(cfg_j, "ffn_hidden", source).get<int>();
    cfg.adapter_hidden = need(cfg_j, "adapter_hidden", source).get<int>();
    const json& dims_j = need(j, "modal_dims", source);
    if (!dims_j.is_array() || dims_j.size() != kModalityCount)
        throw ParseError(source + ": modal_dims must list " + format_int(kModalityCount) +
                         " widths");
    std::array<int, kModalityCount> dims{};
    for (int m = 0; m < kModalityCount; ++m)
        dims[static_cast<std::size_t>(m)] = dims_j[static_cast<std::size_t>(m)].get<int>();
    const bool flat = need(j, "flat_experts", source).get<bool>();

    // rebuild the structure, then overwrite every tensor from the file
    Rng rng(0);
    BackboneParams<float> params = make_backbone<float>(rng, cfg, dims, flat);
    const json& adapters = need(j, "adapters", source);
    for (std::size_t i = 0; i < params.blocks.size(); ++i) {
        if (!params.blocks[i].has_adapter) continue;
        const std::string key = "block" + format_int(static_cast<long long>(i) + 1);
        const json& a = need(adapters, key.c_str(), source + ".adapters");
        AdapterBlock<float>& blk = params.blocks[i].adapter;
        blk.gate.temperature = need(a, "temperature", source).get<double>();
        const ad::Activation act =
            parse_activation(need(a, "activation", source).get<std::string>(), source);
        blk.euclidean.activation = act;
        blk.spherical.activation = act;
        blk.hyperbolic.activation = act;
    }
    const json& tensors = need(j, "tensors", source);
    std::size_t used = 0;
    visit_backbone(params, [&](const std::string& name, ad::Mat<float>& m, bool, bool) {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw ParseError(source + ": missing tensor '" + name + "'");
        const ad::Mat<float> loaded = mat_from_json(*it, source + "." + name);
        if (loaded.rows() != m.rows() || loaded.cols() != m.cols())
            throw ParseError(source + ": tensor '" + name + "' has shape " +
                             format_int(loaded.rows()) + "x" + format_int(loaded.cols()) +
                             ", expected " + format_int(m.rows()) + "x" +
                             format_int(m.cols()));
        m = loaded;
        ++used;
        return 0;
    });
    if (used != tensors.size())
        throw ParseError(source + ": checkpoint carries " +
                         format_int(static_cast<long long>(tensors.size())) +
                         " tensors but this configuration uses " +
                         format_int(static_cast<long long>(used)));
    params.validate();
    return params;
  } catch (const json::exception& e) {
    throw ParseError(source + ": malformed checkpoint (" + e.what() + ")");
  }
}

void save_backbone(const BackboneParams<float>& params, const std::filesystem::path& path) {
    write_text_file(path, backbone_to_json(params));
}

BackboneParams<float> load_backbone(const std::filesystem::path& path) {
    return backbone_from_json(read_text_file(path, "backbone checkpoint"), path.string());
}

}  // namespace geowalk
