#include <zlib.h>

#include <cstring>

#include "miml/log.hpp"
#include "miml/npy.hpp"

namespace miml {
namespace {

constexpr std::uint32_t kLocalSig = 0x04034b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kEndSig = 0x06054b50;

[[noreturn]] void corrupt(const std::string& msg) { throw DataError("npz: corrupt zip container: " + msg); }

struct Reader {
  std::span<const std::uint8_t> bytes;

  void need(std::size_t off, std::size_t n) const {
    if (off > bytes.size() || bytes.size() - off < n) corrupt("record runs past end of file");
  }
  std::uint16_t u16(std::size_t off) const {
    need(off, 2);
    return static_cast<std::uint16_t>(bytes[off] | (bytes[off + 1] << 8));
  }
  std::uint32_t u32(std::size_t off) const {
    need(off, 4);
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + off, 4);
    return v;
  }
  std::uint64_t u64(std::size_t off) const {
    need(off, 8);
    std::uint64_t v;
    std::memcpy(&v, bytes.data() + off, 8);
    return v;
  }
};

std::vector<std::uint8_t> inflate_raw(std::span<const std::uint8_t> in, std::size_t expected) {
  std::vector<std::uint8_t> out(expected);
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) corrupt("inflateInit2 failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || produced != expected) corrupt("deflate stream is damaged");
  return out;
}

std::vector<std::uint8_t> deflate_raw(std::span<const std::uint8_t> in) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, -MAX_WBITS, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw DataError("npz: deflateInit2 failed");
  }
  std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(in.size())));
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  out.resize(zs.total_out);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw DataError("npz: deflate failed");
  return out;
}

std::uint32_t crc_of(std::span<const std::uint8_t> data) {
  return static_cast<std::uint32_t>(crc32(0L, data.data(), static_cast<uInt>(data.size())));
}

}  // namespace

std::map<std::string, NpyArray> parse_npz(std::span<const std::uint8_t> bytes) {
  const Reader r{bytes};
  if (bytes.size() < 22) corrupt("file too small");

  // End-of-central-directory record sits in the last 22 + 65535 bytes.
  std::size_t eocd = std::string::npos;
  const std::size_t lowest = bytes.size() > 22 + 65535 ? bytes.size() - 22 - 65535 : 0;
  for (std::size_t off = bytes.size() - 22 + 1; off-- > lowest;) {
    if (r.u32(off) == kEndSig) {
      eocd = off;
      break;
    }
  }
  if (eocd == std::string::npos) corrupt("no end-of-central-directory record");

  const std::size_t entries = r.u16(eocd + 10);
  std::size_t cursor = r.u32(eocd + 16);

  std::map<std::string, NpyArray> arrays;
  for (std::size_t e = 0; e < entries; ++e) {
    if (r.u32(cursor) != kCentralSig) corrupt("bad central directory signature");
    const std::uint16_t method = r.u16(cursor + 10);
    const std::uint32_t crc = r.u32(cursor + 16);
    std::uint64_t csize = r.u32(cursor + 20);
    std::uint64_t usize = r.u32(cursor + 24);
    const std::size_t name_len = r.u16(cursor + 28);
    const std::size_t extra_len = r.u16(cursor + 30);
    const std::size_t comment_len = r.u16(cursor + 32);
    std::uint64_t local = r.u32(cursor + 42);
    r.need(cursor + 46, name_len + extra_len);
    const std::string name(reinterpret_cast<const char*>(bytes.data() + cursor + 46), name_len);

    // ZIP64 extended information: fields present only where the 32-bit slot is saturated.
    for (std::size_t x = cursor + 46 + name_len; x + 4 <= cursor + 46 + name_len + extra_len;) {
      const std::uint16_t id = r.u16(x), len = r.u16(x + 2);
      if (id == 0x0001) {
        std::size_t f = x + 4;
        if (usize == 0xFFFFFFFFu) usize = r.u64(f), f += 8;
        if (csize == 0xFFFFFFFFu) csize = r.u64(f), f += 8;
        if (local == 0xFFFFFFFFu) local = r.u64(f);
      }
      x += 4 + len;
    }
    cursor += 46 + name_len + extra_len + comment_len;

    if (name.size() < 4 || name.compare(name.size() - 4, 4, ".npy") != 0) {
      log::warn("npz: ignoring non-.npy member '" + name + "'");
      continue;
    }
    if (r.u32(local) != kLocalSig) corrupt("bad local header for '" + name + "'");
    const std::size_t data_off = local + 30 + r.u16(local + 26) + r.u16(local + 28);
    r.need(data_off, csize);
    const auto payload = bytes.subspan(data_off, csize);

    std::vector<std::uint8_t> raw;
    if (method == 0) {
      raw.assign(payload.begin(), payload.end());
    } else if (method == 8) {
      raw = inflate_raw(payload, usize);
    } else {
      corrupt("member '" + name + "' uses unsupported compression method " + std::to_string(method));
    }
    if (raw.size() != usize || crc_of(raw) != crc) corrupt("CRC mismatch in member '" + name + "'");
    arrays.emplace(name.substr(0, name.size() - 4), parse_npy(raw));
  }
  return arrays;
}

std::vector<std::uint8_t> write_npz(const std::map<std::string, NpyArray>& arrays, ZipMethod method) {
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> central;
  auto put16 = [](std::vector<std::uint8_t>& v, std::uint16_t x) {
    v.push_back(static_cast<std::uint8_t>(x));
    v.push_back(static_cast<std::uint8_t>(x >> 8));
  };
  auto put32 = [&put16](std::vector<std::uint8_t>& v, std::uint32_t x) {
    put16(v, static_cast<std::uint16_t>(x));
    put16(v, static_cast<std::uint16_t>(x >> 16));
  };
  // Fixed timestamp (1980-01-01 00:00) keeps archives byte-reproducible.
  constexpr std::uint16_t kDosTime = 0, kDosDate = 0x0021;

  for (const auto& [key, array] : arrays) {
    const std::string name = key + ".npy";
    const auto raw = write_npy(array);
    const auto stored = method == ZipMethod::deflate ? deflate_raw(raw) : raw;
    if (stored.size() >= 0xFFFFFFFFu || out.size() >= 0xFFFFFFFFu) throw DataError("npz: member too large for ZIP32");
    const std::uint16_t zmethod = method == ZipMethod::deflate ? 8 : 0;
    const std::uint32_t crc = crc_of(raw);
    const auto offset = static_cast<std::uint32_t>(out.size());

    put32(out, kLocalSig);
    put16(out, 20);
    put16(out, 0);
    put16(out, zmethod);
    put16(out, kDosTime);
    put16(out, kDosDate);
    put32(out, crc);
    put32(out, static_cast<std::uint32_t>(stored.size()));
    put32(out, static_cast<std::uint32_t>(raw.size()));
    put16(out, static_cast<std::uint16_t>(name.size()));
    put16(out, 0);
    out.insert(out.end(), name.begin(), name.end());
    out.insert(out.end(), stored.begin(), stored.end());

    put32(central, kCentralSig);
    put16(central, 20);
    put16(central, 20);
    put16(central, 0);
    put16(central, zmethod);
    put16(central, kDosTime);
    put16(central, kDosDate);
    put32(central, crc);
    put32(central, static_cast<std::uint32_t>(stored.size()));
    put32(central, static_cast<std::uint32_t>(raw.size()));
    put16(central, static_cast<std::uint16_t>(name.size()));
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put32(central, 0);
    put32(central, offset);
    central.insert(central.end(), name.begin(), name.end());
  }

  const auto cd_offset = static_cast<std::uint32_t>(out.size());
  out.insert(out.end(), central.begin(), central.end());
  put32(out, kEndSig);
  put16(out, 0);
  put16(out, 0);
  put16(out, static_cast<std::uint16_t>(arrays.size()));
  put16(out, static_cast<std::uint16_t>(arrays.size()));
  put32(out, static_cast<std::uint32_t>(central.size()));
  put32(out, cd_offset);
  put16(out, 0);
  return out;
}

const NpyArray& npz_member(const std::map<std::string, NpyArray>& arrays, const std::string& name) {
  const auto it = arrays.find(name);
  if (it == arrays.end()) throw DataError("npz: missing member '" + name + "'");
  return it->second;
}

}  // namespace miml
