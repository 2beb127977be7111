#include "pivot/binio.hpp"
#include "pivot/fileio.hpp"
#include "pivot/model.hpp"

namespace pivot {

namespace {

constexpr std::string_view kMagic = "PIVT";

void put_blocks(binio::Writer& w, const ModelParams& p) {
    for (const auto& [name, m] : p.blocks())
        for (double x : m->data) w.put_f32(static_cast<float>(x));
}

void get_blocks(binio::Reader& r, ModelParams& p) {
    for (auto& [name, m] : p.blocks())
        for (auto& x : m->data) x = static_cast<double>(r.get_f32());
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    binio::Writer w;
    w.put_bytes(kMagic);
    w.put(kCheckpointVersion);
    w.put_string(to_json(ckpt.config).dump());
    const auto blocks = ckpt.params.blocks();
    w.put(static_cast<std::uint32_t>(blocks.size()));
    for (const auto& [name, m] : blocks) {
        w.put_string(name);
        w.put(static_cast<std::uint32_t>(m->rows));
        w.put(static_cast<std::uint32_t>(m->cols));
        for (double x : m->data) w.put_f32(static_cast<float>(x));
    }
    w.put(static_cast<std::uint8_t>(ckpt.adam ? 1 : 0));
    if (ckpt.adam) {
        w.put(ckpt.adam->step);
        put_blocks(w, ckpt.adam->m);
        put_blocks(w, ckpt.adam->v);
    }
    w.put(fnv1a(w.bytes()));
    write_file_atomic(path, w.bytes());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    const std::string ctx = "checkpoint " + path.string();
    if (bytes.size() < kMagic.size() + 8 || std::string_view(bytes).substr(0, 4) != kMagic) {
        throw FormatError(ctx + ": not a PIVT checkpoint");
    }
    const std::string_view payload = std::string_view(bytes).substr(0, bytes.size() - 8);
    binio::Reader tail(std::string_view(bytes).substr(bytes.size() - 8), ctx);
    if (tail.get<std::uint64_t>() != fnv1a(payload)) throw FormatError(ctx + ": checksum mismatch (file is corrupt)");

    binio::Reader r(payload, ctx);
    r.get_bytes(4);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError(ctx + ": unsupported version " + std::to_string(version));
    }
    Checkpoint ck;
    try {
        ck.config = model_config_from_json(nlohmann::json::parse(r.get_string()));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(ctx + ": bad config: " + e.what());
    }
    // Structure comes from the config; values from the file.
    ck.params = init_params(ck.config, 0);
    auto blocks = ck.params.blocks();
    const auto count = r.get<std::uint32_t>();
    if (count != blocks.size()) {
        throw FormatError(ctx + ": expected " + std::to_string(blocks.size()) + " parameter blocks, found " +
                          std::to_string(count));
    }
    for (auto& [name, m] : blocks) {
        const auto stored = r.get_string();
        const auto rows = r.get<std::uint32_t>();
        const auto cols = r.get<std::uint32_t>();
        if (stored != name || rows != m->rows || cols != m->cols) {
            throw FormatError(ctx + ": block '" + stored + "' does not match expected '" + name + "' " +
                              std::to_string(m->rows) + "x" + std::to_string(m->cols));
        }
        for (auto& x : m->data) x = static_cast<double>(r.get_f32());
    }
    if (r.get<std::uint8_t>()) {
        AdamState s = AdamState::for_params(ck.params);
        s.step = r.get<std::uint64_t>();
        get_blocks(r, s.m);
        get_blocks(r, s.v);
        ck.adam = std::move(s);
    }
    if (r.remaining() != 0) throw FormatError(ctx + ": trailing bytes after payload");
    return ck;
}

} // namespace pivot
