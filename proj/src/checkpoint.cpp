#include "tardis/checkpoint.hpp"

#include "tardis/binary_io.hpp"
#include "tardis/errors.hpp"

#include <sstream>

namespace tardis {

namespace {

constexpr std::string_view kMagic = "TARDISCK";
constexpr std::uint32_t kVersion = 1;

} // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelCheckpoint& checkpoint) {
    const Model& model = checkpoint.model;
    nlohmann::json header;
    header["config"] = model.config();
    header["metadata"] = checkpoint.metadata;
    header["tensors"] = nlohmann::json::array();
    for (const auto& t : model.tensors()) header["tensors"].push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    const std::string text = header.dump();

    ByteWriter w;
    w.raw(kMagic);
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.raw(text);
    for (double x : model.parameters()) w.f64(x);
    w.u32(crc32_of(w.buffer()));
    return w.buffer();
}

ModelCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what) {
    ByteReader r(bytes, what);
    if (r.raw(kMagic.size()) != kMagic) throw DataError(what + ": not a checkpoint (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        std::ostringstream os;
        os << what << ": unsupported checkpoint version " << version << " (expected " << kVersion << ")";
        throw DataError(os.str());
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.str());
    } catch (const nlohmann::json::exception& e) {
        throw DataError(what + ": malformed header: " + e.what());
    }
    ModelConfig config = header.at("config").get<ModelConfig>();
    ModelCheckpoint ck{Model(config), header.value("metadata", nlohmann::json::object())};
    const auto& tensors = header.at("tensors");
    if (tensors.size() != ck.model.tensors().size()) throw DataError(what + ": tensor table does not match config");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& t = ck.model.tensors()[i];
        if (tensors[i].at("name").get<std::string>() != t.name || tensors[i].at("rows").get<std::size_t>() != t.rows ||
            tensors[i].at("cols").get<std::size_t>() != t.cols)
            throw DataError(what + ": tensor '" + t.name + "' has unexpected name or shape");
    }
    for (double& x : ck.model.parameters()) x = r.f64();
    const std::size_t body = r.position();
    const std::uint32_t stored = r.u32();
    if (r.remaining() != 0) throw DataError(what + ": trailing bytes after checksum");
    if (crc32_of(bytes.subspan(0, body)) != stored) throw DataError(what + ": checksum mismatch");
    return ck;
}

void save_checkpoint(const ModelCheckpoint& checkpoint, const std::filesystem::path& path) {
    write_file_bytes(path, encode_checkpoint(checkpoint));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file_bytes(path), path.string());
}

} // namespace tardis
