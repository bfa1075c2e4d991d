#include "gatsbi/tensor_store.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace gatsbi {
namespace {

void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n, const char* what) {
        if (pos + n > buf.size())
            throw FormatError(std::string("tensor store truncated while reading ") + what);
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<uint8_t>(buf[pos++]);
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = static_cast<uint8_t>(buf[pos]) | (static_cast<uint16_t>(static_cast<uint8_t>(buf[pos + 1])) << 8);
        pos += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::string bytes(size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void save_tensors(const std::string& path, const TensorMap& tensors) {
    if (tensors.empty()) throw InvariantError("refusing to save an empty tensor map");
    if (tensors.size() > 0xffff) throw InvariantError("tensor map has too many entries for the container");

    std::string out;
    out += "GTSR";
    put_u16(out, kTensorStoreVersion);
    put_u16(out, static_cast<uint16_t>(tensors.size()));

    for (const auto& [name, raw] : tensors) {
        if (name.empty() || name.size() > 0xffff)
            throw InvariantError("tensor name must be 1..65535 bytes: '" + name + "'");
        torch::Tensor t = raw.detach().to(torch::kFloat32).contiguous();
        if (!t.isfinite().all().item<bool>())
            throw InvariantError("tensor '" + name + "' contains non-finite values");
        if (t.dim() > 0xff) throw InvariantError("tensor '" + name + "' has too many dimensions");

        put_u16(out, static_cast<uint16_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(t.dim()));
        for (int64_t d = 0; d < t.dim(); ++d) {
            int64_t dim = t.size(d);
            if (dim < 0 || dim > 0xffffffffll)
                throw InvariantError("tensor '" + name + "' has a dimension outside u32 range");
            put_u32(out, static_cast<uint32_t>(dim));
        }
        out.push_back(0);  // dtype: f32
        const auto* data = reinterpret_cast<const char*>(t.data_ptr<float>());
        out.append(data, static_cast<size_t>(t.numel()) * sizeof(float));
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("short write: " + path);
}

TensorMap load_tensors(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open for reading: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Reader r{buf};
    if (r.bytes(4, "magic") != "GTSR") throw FormatError("bad magic in " + path);
    uint16_t version = r.u16("version");
    if (version != kTensorStoreVersion)
        throw FormatError("unsupported tensor store version " + std::to_string(version) + " in " + path);
    uint16_t count = r.u16("entry count");

    TensorMap out;
    for (uint16_t i = 0; i < count; ++i) {
        uint16_t name_len = r.u16("name length");
        std::string name = r.bytes(name_len, "name");
        uint8_t ndim = r.u8("rank");
        std::vector<int64_t> dims(ndim);
        int64_t numel = 1;
        for (uint8_t d = 0; d < ndim; ++d) {
            dims[d] = r.u32("dims");
            numel *= dims[d];
        }
        uint8_t dtype = r.u8("dtype");
        if (dtype != 0) throw FormatError("unknown dtype tag " + std::to_string(dtype) + " for '" + name + "'");
        std::string payload = r.bytes(static_cast<size_t>(numel) * sizeof(float), "payload");
        torch::Tensor t = torch::empty(dims, torch::kFloat32);
        std::memcpy(t.data_ptr<float>(), payload.data(), payload.size());
        if (out.count(name)) throw FormatError("duplicate entry '" + name + "' in " + path);
        out[name] = t;
    }
    if (r.pos != buf.size()) throw FormatError("trailing bytes after last entry in " + path);
    return out;
}

}  // namespace gatsbi
