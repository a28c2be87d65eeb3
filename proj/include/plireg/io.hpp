#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "plireg/field.hpp"
#include "plireg/image.hpp"
#include "plireg/transform.hpp"

namespace plireg {

// ---------------------------------------------------------------------------
// Line-based key-value text, used by transform files, sidecars, manifests
// and the CLI summary. One `key = value` per line, '#' comments.
// ---------------------------------------------------------------------------

class KeyValueFile {
public:
    void set(const std::string& key, const std::string& value) {
        if (data_.find(key) == data_.end()) order_.push_back(key);
        data_[key] = value;
    }
    void set(const std::string& key, double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        set(key, os.str());
    }
    void set(const std::string& key, int v) { set(key, std::to_string(v)); }
    void set(const std::string& key, std::size_t v) { set(key, std::to_string(v)); }

    bool has(const std::string& key) const { return data_.count(key) != 0; }
    const std::string& get(const std::string& key) const {
        auto it = data_.find(key);
        if (it == data_.end()) throw std::runtime_error("key-value file: missing key '" + key + "'");
        return it->second;
    }
    std::string get_or(const std::string& key, const std::string& def) const {
        auto it = data_.find(key);
        return it == data_.end() ? def : it->second;
    }
    double get_double(const std::string& key) const { return std::stod(get(key)); }
    int get_int(const std::string& key) const { return std::stoi(get(key)); }

    const std::vector<std::string>& keys() const { return order_; }

    std::string serialize() const {
        std::ostringstream os;
        for (const auto& k : order_) os << k << " = " << data_.at(k) << "\n";
        return os.str();
    }

    static KeyValueFile parse(std::istream& in) {
        KeyValueFile kv;
        std::string line;
        while (std::getline(in, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            const std::string key = trim(line.substr(0, eq));
            const std::string val = trim(line.substr(eq + 1));
            if (!key.empty()) kv.set(key, val);
        }
        return kv;
    }

    static KeyValueFile load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open " + path);
        return parse(in);
    }

private:
    std::map<std::string, std::string> data_;
    std::vector<std::string> order_;
};

// Atomic write: temp file in the same directory, then rename.
inline void write_file_atomic(const std::string& path, const void* bytes, std::size_t n) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        out.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
        if (!out) throw std::runtime_error("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline void write_text_atomic(const std::string& path, const std::string& text) {
    write_file_atomic(path, text.data(), text.size());
}

// FNV-1a 64-bit, used for resume guards.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const std::uint8_t*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char buf[65536];
    std::uint64_t h = 1469598103934665603ull;
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// PNG (8/16-bit gray). Intensities normalized to [0,1] on load.
// ---------------------------------------------------------------------------

inline Image2D read_png(const std::string& path, double pixel_size_um = 1.0) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("png read error: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (color & PNG_COLOR_MASK_PALETTE) png_set_palette_to_rgb(png);
    if (color & PNG_COLOR_MASK_COLOR || color & PNG_COLOR_MASK_PALETTE) png_set_rgb_to_gray(png, 1, -1.0, -1.0);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (depth == 16) png_set_swap(png);  // libpng serves big-endian 16-bit
    png_read_update_info(png, info);

    const std::size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<std::uint8_t> raw(rowbytes * h);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = raw.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    Image2D img(static_cast<int>(w), static_cast<int>(h), pixel_size_um);
    if (depth == 16) {
        const auto* p16 = reinterpret_cast<const std::uint16_t*>(raw.data());
        for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(p16[i] / 65535.0);
    } else {
        for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(raw[i] / 255.0);
    }
    return img;
}

inline void write_png(const std::string& path, const Image2D& img, int bit_depth = 16) {
    if (bit_depth != 8 && bit_depth != 16) throw std::invalid_argument("write_png: bit depth must be 8 or 16");
    const std::string tmp = path + ".tmp";
    FILE* fp = std::fopen(tmp.c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot write " + tmp);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("png write error: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.width(), img.height(), bit_depth, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (bit_depth == 16) png_set_swap(png);

    const int w = img.width(), h = img.height();
    if (bit_depth == 16) {
        std::vector<std::uint16_t> row(w);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x)
                row[x] = static_cast<std::uint16_t>(std::lround(std::clamp<double>(img.at(x, y), 0.0, 1.0) * 65535.0));
            png_write_row(png, reinterpret_cast<png_bytep>(row.data()));
        }
    } else {
        std::vector<std::uint8_t> row(w);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x)
                row[x] = static_cast<std::uint8_t>(std::lround(std::clamp<double>(img.at(x, y), 0.0, 1.0) * 255.0));
            png_write_row(png, row.data());
        }
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Minimal TIFF: single-plane gray, uncompressed, strip-organized.
// Reads 8/16-bit unsigned and 32-bit float; writes 32-bit float.
// ---------------------------------------------------------------------------

namespace tiffdetail {

inline std::uint32_t rd(const std::uint8_t* p, int n, bool le) {
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint32_t>(p[le ? i : n - 1 - i]) << (8 * i);
    return v;
}

struct Entry {
    std::uint16_t tag = 0, type = 0;
    std::uint32_t count = 0;
    std::uint32_t value_off = 0;  // inline value or offset
};

}  // namespace tiffdetail

inline Image2D read_tiff(const std::string& path, double pixel_size_um = 1.0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 8) throw std::runtime_error("tiff: truncated header in " + path);
    const bool le = buf[0] == 'I' && buf[1] == 'I';
    if (!le && !(buf[0] == 'M' && buf[1] == 'M')) throw std::runtime_error("tiff: bad byte-order mark in " + path);
    using tiffdetail::rd;
    if (rd(&buf[2], 2, le) != 42) throw std::runtime_error("tiff: bad magic in " + path);
    const std::uint32_t ifd_off = rd(&buf[4], 4, le);
    if (ifd_off + 2 > buf.size()) throw std::runtime_error("tiff: bad IFD offset in " + path);
    const std::uint32_t n_entries = rd(&buf[ifd_off], 2, le);

    std::uint32_t width = 0, height = 0, bits = 8, sample_format = 1, compression = 1, spp = 1;
    std::uint32_t rows_per_strip = 0xFFFFFFFFu;
    std::vector<std::uint32_t> strip_offsets, strip_counts;

    auto read_values = [&](const tiffdetail::Entry& e) {
        std::vector<std::uint32_t> vals;
        const int tsize = (e.type == 3) ? 2 : (e.type == 4 ? 4 : (e.type == 1 ? 1 : 4));
        const std::size_t total = static_cast<std::size_t>(e.count) * tsize;
        std::uint32_t off;
        std::uint8_t inline_buf[4];
        const std::uint8_t* src;
        if (total <= 4) {
            // inline; re-serialize value_off in file order
            for (int i = 0; i < 4; ++i) inline_buf[i] = static_cast<std::uint8_t>((e.value_off >> (8 * (le ? i : 3 - i))) & 0xFF);
            src = inline_buf;
        } else {
            off = e.value_off;
            if (off + total > buf.size()) throw std::runtime_error("tiff: entry out of bounds");
            src = &buf[off];
        }
        for (std::uint32_t i = 0; i < e.count; ++i) vals.push_back(rd(src + i * tsize, tsize, le));
        return vals;
    };

    for (std::uint32_t i = 0; i < n_entries; ++i) {
        const std::size_t p = ifd_off + 2 + i * 12;
        if (p + 12 > buf.size()) throw std::runtime_error("tiff: truncated IFD in " + path);
        tiffdetail::Entry e;
        e.tag = static_cast<std::uint16_t>(rd(&buf[p], 2, le));
        e.type = static_cast<std::uint16_t>(rd(&buf[p + 2], 2, le));
        e.count = rd(&buf[p + 4], 4, le);
        e.value_off = rd(&buf[p + 8], 4, le);
        switch (e.tag) {
            case 256: width = read_values(e)[0]; break;
            case 257: height = read_values(e)[0]; break;
            case 258: bits = read_values(e)[0]; break;
            case 259: compression = read_values(e)[0]; break;
            case 277: spp = read_values(e)[0]; break;
            case 278: rows_per_strip = read_values(e)[0]; break;
            case 273: strip_offsets = read_values(e); break;
            case 279: strip_counts = read_values(e); break;
            case 339: sample_format = read_values(e)[0]; break;
            default: break;
        }
    }
    if (compression != 1) throw std::runtime_error("tiff: only uncompressed data supported: " + path);
    if (spp != 1) throw std::runtime_error("tiff: only single-plane gray supported: " + path);
    if (width == 0 || height == 0 || strip_offsets.empty())
        throw std::runtime_error("tiff: missing required tags in " + path);
    if (!(bits == 8 || bits == 16 || bits == 32))
        throw std::runtime_error("tiff: unsupported bits-per-sample in " + path);
    if (bits == 32 && sample_format != 3)
        throw std::runtime_error("tiff: 32-bit data must be IEEE float in " + path);

    // gather pixel bytes strip by strip
    std::vector<std::uint8_t> pix;
    pix.reserve(static_cast<std::size_t>(width) * height * (bits / 8));
    for (std::size_t s = 0; s < strip_offsets.size(); ++s) {
        const std::uint32_t off = strip_offsets[s];
        const std::uint32_t cnt = s < strip_counts.size() ? strip_counts[s]
                                                          : static_cast<std::uint32_t>(width * height * (bits / 8));
        if (off + cnt > buf.size()) throw std::runtime_error("tiff: strip out of bounds in " + path);
        pix.insert(pix.end(), buf.begin() + off, buf.begin() + off + cnt);
    }
    const std::size_t need = static_cast<std::size_t>(width) * height * (bits / 8);
    if (pix.size() < need) throw std::runtime_error("tiff: truncated pixel data in " + path);

    Image2D img(static_cast<int>(width), static_cast<int>(height), pixel_size_um);
    const std::size_t n = img.size();
    if (bits == 8) {
        for (std::size_t i = 0; i < n; ++i) img[i] = static_cast<float>(pix[i] / 255.0);
    } else if (bits == 16) {
        for (std::size_t i = 0; i < n; ++i)
            img[i] = static_cast<float>(rd(&pix[i * 2], 2, le) / 65535.0);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint32_t u = rd(&pix[i * 4], 4, le);
            float f;
            std::memcpy(&f, &u, 4);
            img[i] = f;
        }
    }
    img.check_finite("read_tiff");
    return img;
}

inline void write_tiff_f32(const std::string& path, const Image2D& img) {
    // little-endian, one strip
    const std::uint32_t w = static_cast<std::uint32_t>(img.width());
    const std::uint32_t h = static_cast<std::uint32_t>(img.height());
    const std::uint32_t data_bytes = w * h * 4;
    std::vector<std::uint8_t> out;
    auto put16 = [&](std::uint16_t v) {
        out.push_back(v & 0xFF);
        out.push_back((v >> 8) & 0xFF);
    };
    auto put32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back((v >> (8 * i)) & 0xFF);
    };
    out.push_back('I');
    out.push_back('I');
    put16(42);
    const std::uint32_t pix_off = 8;
    put32(pix_off + data_bytes);  // IFD follows the pixel data
    for (std::uint32_t i = 0; i < w * h; ++i) {
        float f = img[i];
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        put32(u);
    }
    const std::uint16_t n_entries = 10;
    put16(n_entries);
    auto entry = [&](std::uint16_t tag, std::uint16_t type, std::uint32_t count, std::uint32_t value) {
        put16(tag);
        put16(type);
        put32(count);
        if (type == 3 && count == 1) {
            put16(static_cast<std::uint16_t>(value));
            put16(0);
        } else {
            put32(value);
        }
    };
    entry(256, 4, 1, w);            // ImageWidth
    entry(257, 4, 1, h);            // ImageLength
    entry(258, 3, 1, 32);           // BitsPerSample
    entry(259, 3, 1, 1);            // Compression: none
    entry(262, 3, 1, 1);            // Photometric: BlackIsZero
    entry(273, 4, 1, pix_off);      // StripOffsets
    entry(277, 3, 1, 1);            // SamplesPerPixel
    entry(278, 4, 1, h);            // RowsPerStrip
    entry(279, 4, 1, data_bytes);   // StripByteCounts
    entry(339, 3, 1, 3);            // SampleFormat: IEEE float
    put32(0);                       // next IFD
    write_file_atomic(path, out.data(), out.size());
}

inline Image2D read_image_any(const std::string& path, double pixel_size_um = 1.0) {
    const auto ext = std::filesystem::path(path).extension().string();
    std::string lower = ext;
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == ".png") return read_png(path, pixel_size_um);
    if (lower == ".tif" || lower == ".tiff") return read_tiff(path, pixel_size_um);
    throw std::runtime_error("unsupported image format: " + path);
}

// ---------------------------------------------------------------------------
// Deformation field file: magic "PLIDEF01", little-endian
// header {width u32, height u32, pixel_size f64}, then row-major
// float32 (ux, uy) pairs in pixels.
// ---------------------------------------------------------------------------

inline void write_field(const std::string& path, const DeformationField& f, double pixel_size_um) {
    std::vector<std::uint8_t> out;
    const char magic[8] = {'P', 'L', 'I', 'D', 'E', 'F', '0', '1'};
    out.insert(out.end(), magic, magic + 8);
    auto put32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back((v >> (8 * i)) & 0xFF);
    };
    put32(static_cast<std::uint32_t>(f.width));
    put32(static_cast<std::uint32_t>(f.height));
    double ps = pixel_size_um;
    std::uint64_t psu;
    std::memcpy(&psu, &ps, 8);
    for (int i = 0; i < 8; ++i) out.push_back((psu >> (8 * i)) & 0xFF);
    out.reserve(out.size() + f.size() * 8);
    for (std::size_t i = 0; i < f.size(); ++i) {
        std::uint32_t ux, uy;
        std::memcpy(&ux, &f.ux[i], 4);
        std::memcpy(&uy, &f.uy[i], 4);
        put32(ux);
        put32(uy);
    }
    write_file_atomic(path, out.data(), out.size());
}

inline DeformationField read_field(const std::string& path, double* pixel_size_um = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 24 || std::memcmp(buf.data(), "PLIDEF01", 8) != 0)
        throw std::runtime_error("not a PLIDEF01 file: " + path);
    auto rd32 = [&](std::size_t off) {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[off + i]) << (8 * i);
        return v;
    };
    const std::uint32_t w = rd32(8), h = rd32(12);
    std::uint64_t psu = 0;
    for (int i = 0; i < 8; ++i) psu |= static_cast<std::uint64_t>(buf[16 + i]) << (8 * i);
    double ps;
    std::memcpy(&ps, &psu, 8);
    if (pixel_size_um) *pixel_size_um = ps;
    const std::size_t need = 24 + static_cast<std::size_t>(w) * h * 8;
    if (buf.size() < need) throw std::runtime_error("truncated PLIDEF01 file: " + path);
    DeformationField f(static_cast<int>(w), static_cast<int>(h));
    for (std::size_t i = 0; i < f.size(); ++i) {
        const std::uint32_t ux = rd32(24 + i * 8), uy = rd32(24 + i * 8 + 4);
        std::memcpy(&f.ux[i], &ux, 4);
        std::memcpy(&f.uy[i], &uy, 4);
    }
    return f;
}

// ---------------------------------------------------------------------------
// Transform file: key-value text with kind, parameters, center, pixel sizes.
// ---------------------------------------------------------------------------

inline void write_transform(const std::string& path, const TransformParams& t,
                            double fixed_px_um, double moving_px_um) {
    KeyValueFile kv;
    kv.set("kind", std::string(to_string(t.kind)));
    kv.set("tx_px", t.tx);
    kv.set("ty_px", t.ty);
    kv.set("angle_rad", t.angle);
    kv.set("scale", t.scale);
    kv.set("center_x_px", t.center.x);
    kv.set("center_y_px", t.center.y);
    kv.set("fixed_pixel_size_um", fixed_px_um);
    kv.set("moving_pixel_size_um", moving_px_um);
    write_text_atomic(path, kv.serialize());
}

inline TransformParams read_transform(const std::string& path,
                                      double* fixed_px_um = nullptr, double* moving_px_um = nullptr) {
    KeyValueFile kv = KeyValueFile::load(path);
    const std::string kind = kv.get("kind");
    TransformParams t;
    if (kind == "translation")
        t = TransformParams::translation(kv.get_double("tx_px"), kv.get_double("ty_px"));
    else if (kind == "rigid")
        t = TransformParams::rigid(kv.get_double("tx_px"), kv.get_double("ty_px"), kv.get_double("angle_rad"),
                                   {kv.get_double("center_x_px"), kv.get_double("center_y_px")});
    else if (kind == "similarity")
        t = TransformParams::similarity(kv.get_double("tx_px"), kv.get_double("ty_px"), kv.get_double("angle_rad"),
                                        kv.get_double("scale"),
                                        {kv.get_double("center_x_px"), kv.get_double("center_y_px")});
    else
        throw std::runtime_error("transform file: unknown kind '" + kind + "' in " + path);
    if (fixed_px_um) *fixed_px_um = kv.get_double("fixed_pixel_size_um");
    if (moving_px_um) *moving_px_um = kv.get_double("moving_pixel_size_um");
    return t;
}

// ---------------------------------------------------------------------------
// Landmarks: CSV with header section,x_fixed,y_fixed,x_moving,y_moving.
// ---------------------------------------------------------------------------

struct LandmarkPair {
    Vec2 fixed_px;
    Vec2 moving_px;
};

struct LandmarkSet {
    int section = 0;
    std::vector<LandmarkPair> pairs;
};

inline void write_landmarks(const std::string& path, const std::vector<LandmarkSet>& sets) {
    std::ostringstream os;
    os.precision(17);
    os << "section,x_fixed,y_fixed,x_moving,y_moving\n";
    for (const auto& s : sets)
        for (const auto& p : s.pairs)
            os << s.section << ',' << p.fixed_px.x << ',' << p.fixed_px.y << ','
               << p.moving_px.x << ',' << p.moving_px.y << '\n';
    write_text_atomic(path, os.str());
}

inline std::vector<LandmarkSet> read_landmarks(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty landmark file: " + path);
    std::map<int, LandmarkSet> by_section;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tok;
        double v[5];
        for (int i = 0; i < 5; ++i) {
            if (!std::getline(ls, tok, ',')) throw std::runtime_error("bad landmark row: " + line);
            v[i] = std::stod(tok);
        }
        const int sec = static_cast<int>(v[0]);
        auto& set = by_section[sec];
        set.section = sec;
        set.pairs.push_back({{v[1], v[2]}, {v[3], v[4]}});
    }
    std::vector<LandmarkSet> out;
    for (auto& [_, s] : by_section) out.push_back(std::move(s));
    return out;
}

// ---------------------------------------------------------------------------
// Volume: raw float32 little-endian + key-value sidecar.
// ---------------------------------------------------------------------------

struct VolumeMeta {
    int nx = 0, ny = 0, nz = 0;
    double voxel_x_um = 0, voxel_y_um = 0, voxel_z_um = 0;
    std::string modality;
    std::vector<int> missing_slices;
};

inline void write_volume_sidecar(const std::string& path, const VolumeMeta& m, const std::string& raw_name) {
    KeyValueFile kv;
    kv.set("raw_file", raw_name);
    kv.set("dims_x", m.nx);
    kv.set("dims_y", m.ny);
    kv.set("dims_z", m.nz);
    kv.set("voxel_size_x_um", m.voxel_x_um);
    kv.set("voxel_size_y_um", m.voxel_y_um);
    kv.set("voxel_size_z_um", m.voxel_z_um);
    kv.set("modality", m.modality);
    kv.set("dtype", std::string("float32_le"));
    std::ostringstream miss;
    for (std::size_t i = 0; i < m.missing_slices.size(); ++i) {
        if (i) miss << ' ';
        miss << m.missing_slices[i];
    }
    kv.set("missing_slices", miss.str());
    write_text_atomic(path, kv.serialize());
}

inline VolumeMeta read_volume_sidecar(const std::string& path) {
    KeyValueFile kv = KeyValueFile::load(path);
    VolumeMeta m;
    m.nx = kv.get_int("dims_x");
    m.ny = kv.get_int("dims_y");
    m.nz = kv.get_int("dims_z");
    m.voxel_x_um = kv.get_double("voxel_size_x_um");
    m.voxel_y_um = kv.get_double("voxel_size_y_um");
    m.voxel_z_um = kv.get_double("voxel_size_z_um");
    m.modality = kv.get_or("modality", "");
    std::istringstream miss(kv.get_or("missing_slices", ""));
    int v;
    while (miss >> v) m.missing_slices.push_back(v);
    return m;
}

}  // namespace plireg
