#include "flat/checkpoint.hpp"

#include "flat/errors.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace flat {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;
constexpr const char* kFormatName = "flat-checkpoint";

struct TensorRef {
    std::string name;
    std::string file;
    std::vector<Index> shape;
    std::string dtype; // "f64" or "f32"
};

void write_tensor(const fs::path& dir, json& tensors, const std::string& name, const double* data,
                  std::vector<Index> shape, bool f32) {
    Index count = 1;
    for (Index d : shape) count *= d;

    const std::string file = name + ".bin";
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open " + (dir / file).string() + " for writing");
    if (f32) {
        std::vector<float> buf(static_cast<std::size_t>(count));
        for (Index i = 0; i < count; ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(data[i]);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
        out.write(reinterpret_cast<const char*>(data),
                  static_cast<std::streamsize>(count) * static_cast<std::streamsize>(sizeof(double)));
    }
    if (!out) throw io_error("short write to " + (dir / file).string());

    json t;
    t["name"] = name;
    t["file"] = file;
    t["shape"] = shape;
    t["dtype"] = f32 ? "f32" : "f64";
    tensors.push_back(std::move(t));
}

void write_mat(const fs::path& dir, json& tensors, const std::string& name, const Mat& m, bool f32) {
    write_tensor(dir, tensors, name, m.data(), {m.rows(), m.cols()}, f32);
}

void write_vec(const fs::path& dir, json& tensors, const std::string& name, const Vec& v, bool f32) {
    write_tensor(dir, tensors, name, v.data(), {v.size()}, f32);
}

json config_to_json(const ModelConfig& cfg) {
    json j;
    j["d_hid"] = cfg.d_hid;
    j["d_head"] = cfg.d_head;
    j["n_q_heads"] = cfg.n_q_heads;
    j["n_kv_heads"] = cfg.n_kv_heads;
    j["d_int"] = cfg.d_int;
    j["n_layers"] = cfg.n_layers;
    j["norm_eps"] = cfg.norm_eps;
    return j;
}

ModelConfig config_from_json(const json& j) {
    ModelConfig cfg;
    try {
        cfg.d_hid = j.at("d_hid").get<int>();
        cfg.d_head = j.at("d_head").get<int>();
        cfg.n_q_heads = j.at("n_q_heads").get<int>();
        cfg.n_kv_heads = j.at("n_kv_heads").get<int>();
        cfg.d_int = j.at("d_int").get<int>();
        cfg.n_layers = j.at("n_layers").get<int>();
        cfg.norm_eps = j.at("norm_eps").get<double>();
    } catch (const json::exception& e) {
        throw data_error(std::string("manifest config is malformed: ") + e.what());
    }
    return cfg;
}

void write_manifest(const fs::path& dir, const json& manifest) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw io_error("cannot open " + (dir / "manifest.json").string() + " for writing");
    out << manifest.dump(2) << "\n";
    if (!out) throw io_error("short write to " + (dir / "manifest.json").string());
}

json load_manifest(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw io_error("cannot open " + (dir / "manifest.json").string());
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        throw data_error("manifest.json is not valid JSON: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != kFormatName)
        throw data_error((dir / "manifest.json").string() + " is not a " + kFormatName +
                         " manifest");
    if (manifest.value("schema", -1) != kSchemaVersion)
        throw data_error("unsupported checkpoint schema version");
    return manifest;
}

class TensorReader {
  public:
    TensorReader(const fs::path& dir, const json& manifest) : dir_(dir) {
        for (const auto& t : manifest.at("tensors")) {
            TensorRef ref;
            ref.name = t.at("name").get<std::string>();
            ref.file = t.at("file").get<std::string>();
            for (const auto& d : t.at("shape")) ref.shape.push_back(d.get<Index>());
            ref.dtype = t.at("dtype").get<std::string>();
            if (ref.dtype != "f64" && ref.dtype != "f32")
                throw data_error("tensor " + ref.name + " has unsupported dtype " + ref.dtype);
            refs_[ref.name] = std::move(ref);
        }
    }

    Mat read_mat(const std::string& name, Index rows, Index cols) const {
        const TensorRef& ref = find(name);
        if (ref.shape.size() != 2 || ref.shape[0] != rows || ref.shape[1] != cols)
            throw data_error("tensor " + name + " has unexpected shape in manifest");
        Mat m(rows, cols);
        read_into(ref, m.data(), rows * cols);
        if (!m.allFinite())
            throw data_error("tensor " + name + " contains a non-finite value");
        return m;
    }

    Vec read_vec(const std::string& name, Index n) const {
        const TensorRef& ref = find(name);
        if (ref.shape.size() != 1 || ref.shape[0] != n)
            throw data_error("tensor " + name + " has unexpected shape in manifest");
        Vec v(n);
        read_into(ref, v.data(), n);
        if (!v.allFinite())
            throw data_error("tensor " + name + " contains a non-finite value");
        return v;
    }

  private:
    const TensorRef& find(const std::string& name) const {
        auto it = refs_.find(name);
        if (it == refs_.end()) throw data_error("manifest is missing tensor " + name);
        return it->second;
    }

    void read_into(const TensorRef& ref, double* dst, Index count) const {
        const fs::path path = dir_ / ref.file;
        std::error_code ec;
        const auto actual = fs::file_size(path, ec);
        if (ec) throw io_error("missing tensor file " + path.string() + " for tensor " + ref.name);
        const std::size_t elem = ref.dtype == "f64" ? sizeof(double) : sizeof(float);
        const std::uintmax_t expected = static_cast<std::uintmax_t>(count) * elem;
        if (actual != expected)
            throw data_error("tensor " + ref.name + ": file " + path.string() + " holds " +
                             std::to_string(actual) + " bytes, expected " +
                             std::to_string(expected));
        std::ifstream in(path, std::ios::binary);
        if (!in) throw io_error("cannot open " + path.string());
        if (ref.dtype == "f64") {
            in.read(reinterpret_cast<char*>(dst),
                    static_cast<std::streamsize>(expected));
        } else {
            std::vector<float> buf(static_cast<std::size_t>(count));
            in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected));
            for (Index i = 0; i < count; ++i) dst[i] = static_cast<double>(buf[static_cast<std::size_t>(i)]);
        }
        if (!in) throw io_error("short read from " + path.string());
    }

    fs::path dir_;
    std::map<std::string, TensorRef> refs_;
};

std::string layer_prefix(int l) { return "layers." + std::to_string(l) + "."; }

} // namespace

void save_checkpoint(const Model& model, const fs::path& dir, bool f32) {
    model.validate();
    json manifest;
    manifest["format"] = kFormatName;
    manifest["schema"] = kSchemaVersion;
    manifest["compressed"] = false;
    manifest["config"] = config_to_json(model.config);

    std::error_code ec;
    fs::create_directories(dir, ec);

    json layers = json::array();
    json tensors = json::array();
    for (int l = 0; l < model.config.n_layers; ++l) {
        const DecoderWeights& w = model.layers[l];
        const std::string p = layer_prefix(l);
        write_mat(dir, tensors, p + "w_q", w.w_q, f32);
        write_mat(dir, tensors, p + "w_k", w.w_k, f32);
        write_mat(dir, tensors, p + "w_v", w.w_v, f32);
        write_mat(dir, tensors, p + "w_o", w.w_o, f32);
        write_mat(dir, tensors, p + "w_up", w.w_up, f32);
        write_mat(dir, tensors, p + "w_down", w.w_down, f32);
        write_vec(dir, tensors, p + "rms_attn", w.rms_attn, f32);
        write_vec(dir, tensors, p + "rms_mlp", w.rms_mlp, f32);
        layers.push_back(json{{"index", l}});
    }
    manifest["layers"] = std::move(layers);
    manifest["tensors"] = std::move(tensors);
    write_manifest(dir, manifest);
}

void save_checkpoint(const CompressedModel& model, const fs::path& dir, bool f32) {
    model.validate();
    json manifest;
    manifest["format"] = kFormatName;
    manifest["schema"] = kSchemaVersion;
    manifest["compressed"] = true;
    manifest["config"] = config_to_json(model.config);

    std::error_code ec;
    fs::create_directories(dir, ec);

    json layers = json::array();
    json tensors = json::array();
    for (int l = 0; l < model.config.n_layers; ++l) {
        const CompressedDecoderWeights& w = model.layers[l];
        const std::string p = layer_prefix(l);
        write_mat(dir, tensors, p + "w_q", w.w_q, f32);
        write_mat(dir, tensors, p + "w_k", w.w_k, f32);
        write_mat(dir, tensors, p + "w_v", w.w_v, f32);
        write_mat(dir, tensors, p + "w_o", w.w_o, f32);
        if (w.qk_compressed) {
            write_mat(dir, tensors, p + "q_basis", w.q_basis, f32);
            write_mat(dir, tensors, p + "k_basis", w.k_basis, f32);
        }
        write_mat(dir, tensors, p + "w_up", w.w_up, f32);
        write_mat(dir, tensors, p + "w_down", w.w_down, f32);
        write_vec(dir, tensors, p + "rms_attn", w.rms_attn, f32);
        write_vec(dir, tensors, p + "rms_mlp", w.rms_mlp, f32);

        json entry;
        entry["index"] = l;
        entry["retained_rank"] = w.retained_rank;
        entry["retained_mlp"] = w.retained_mlp;
        entry["qk_compressed"] = w.qk_compressed;
        entry["mlp_indices"] = w.mlp_indices;
        layers.push_back(std::move(entry));
    }
    manifest["layers"] = std::move(layers);
    manifest["tensors"] = std::move(tensors);
    write_manifest(dir, manifest);
}

bool checkpoint_is_compressed(const fs::path& dir) {
    return load_manifest(dir).value("compressed", false);
}

Model load_checkpoint(const fs::path& dir) {
    const json manifest = load_manifest(dir);
    if (manifest.value("compressed", false))
        throw data_error(dir.string() + " holds a compressed checkpoint; use the compressed loader");

    Model model;
    model.config = config_from_json(manifest.at("config"));
    model.config.validate();
    const ModelConfig& cfg = model.config;

    TensorReader reader(dir, manifest);
    const Index H = cfg.n_q_heads, G = cfg.n_kv_heads, dh = cfg.d_head;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = layer_prefix(l);
        DecoderWeights w;
        w.w_q = reader.read_mat(p + "w_q", H * dh, cfg.d_hid);
        w.w_k = reader.read_mat(p + "w_k", G * dh, cfg.d_hid);
        w.w_v = reader.read_mat(p + "w_v", G * dh, cfg.d_hid);
        w.w_o = reader.read_mat(p + "w_o", cfg.d_hid, H * dh);
        w.w_up = reader.read_mat(p + "w_up", cfg.d_int, cfg.d_hid);
        w.w_down = reader.read_mat(p + "w_down", cfg.d_hid, cfg.d_int);
        w.rms_attn = reader.read_vec(p + "rms_attn", cfg.d_hid);
        w.rms_mlp = reader.read_vec(p + "rms_mlp", cfg.d_hid);
        model.layers.push_back(std::move(w));
    }
    model.validate();
    return model;
}

CompressedModel load_compressed_checkpoint(const fs::path& dir) {
    const json manifest = load_manifest(dir);
    if (!manifest.value("compressed", false))
        throw data_error(dir.string() + " holds a dense checkpoint; use load_checkpoint");

    CompressedModel model;
    model.config = config_from_json(manifest.at("config"));
    model.config.validate();
    const ModelConfig& cfg = model.config;

    const json& layers = manifest.at("layers");
    if (static_cast<int>(layers.size()) != cfg.n_layers)
        throw data_error("manifest layer table does not match n_layers");

    TensorReader reader(dir, manifest);
    const Index H = cfg.n_q_heads, G = cfg.n_kv_heads, dh = cfg.d_head;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const json& entry = layers.at(l);
        CompressedDecoderWeights w;
        try {
            w.retained_rank = entry.at("retained_rank").get<int>();
            w.retained_mlp = entry.at("retained_mlp").get<int>();
            w.qk_compressed = entry.at("qk_compressed").get<bool>();
            w.mlp_indices = entry.at("mlp_indices").get<std::vector<int>>();
        } catch (const json::exception& e) {
            throw data_error("manifest layer entry " + std::to_string(l) + " is malformed: " +
                             e.what());
        }
        const Index r = w.retained_rank, k = w.retained_mlp;
        const Index qk_rows = w.qk_compressed ? r : dh;
        const std::string p = layer_prefix(l);
        w.w_q = reader.read_mat(p + "w_q", H * qk_rows, cfg.d_hid);
        w.w_k = reader.read_mat(p + "w_k", G * qk_rows, cfg.d_hid);
        if (w.qk_compressed) {
            w.q_basis = reader.read_mat(p + "q_basis", H * dh, r);
            w.k_basis = reader.read_mat(p + "k_basis", G * dh, r);
        }
        w.w_v = reader.read_mat(p + "w_v", G * r, cfg.d_hid);
        w.w_o = reader.read_mat(p + "w_o", cfg.d_hid, H * r);
        w.w_up = reader.read_mat(p + "w_up", k, cfg.d_hid);
        w.w_down = reader.read_mat(p + "w_down", cfg.d_hid, k);
        w.rms_attn = reader.read_vec(p + "rms_attn", cfg.d_hid);
        w.rms_mlp = reader.read_vec(p + "rms_mlp", cfg.d_hid);
        model.layers.push_back(std::move(w));
    }
    model.validate();
    return model;
}

} // namespace flat
