#ifndef ICE_ZIP_HPP
#define ICE_ZIP_HPP

// In-memory zip container: stored and deflate members, zip64 size fields on read.
// Writes are byte-reproducible (fixed timestamps, fixed compression level).

#include "ice/common.hpp"

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace ice {

struct ZipMember {
  std::string name;
  std::vector<unsigned char> bytes;
};

namespace zip_detail {

inline constexpr std::uint32_t kLocalSig = 0x04034b50;
inline constexpr std::uint32_t kCentralSig = 0x02014b50;
inline constexpr std::uint32_t kEndSig = 0x06054b50;
inline constexpr std::uint32_t kEnd64Sig = 0x06064b50;
inline constexpr std::uint16_t kDosDate = (0 << 9) | (1 << 5) | 1;  // 1980-01-01

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> b) : b_(b) {}

  std::uint64_t u(std::size_t at, std::size_t width) const {
    if (at + width > b_.size()) throw IoError("corrupt zip: record runs past end of archive");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(b_[at + i]) << (8 * i);
    return v;
  }

  std::span<const unsigned char> bytes(std::size_t at, std::size_t count) const {
    if (at > b_.size() || count > b_.size() - at) throw IoError("corrupt zip: member data runs past end");
    return b_.subspan(at, count);
  }

  std::size_t size() const { return b_.size(); }

 private:
  std::span<const unsigned char> b_;
};

class Writer {
 public:
  void u16(std::uint32_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void raw(std::span<const unsigned char> s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void raw(const std::string& s) { out_.insert(out_.end(), s.begin(), s.end()); }
  std::size_t pos() const { return out_.size(); }
  std::vector<unsigned char> take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, std::size_t width) {
    for (std::size_t i = 0; i < width; ++i) out_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
  }
  std::vector<unsigned char> out_;
};

inline std::uint32_t crc(std::span<const unsigned char> data) {
  uLong c = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < data.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(data.size() - done, 1u << 30));
    c = crc32(c, data.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(c);
}

inline std::vector<unsigned char> inflate_raw(std::span<const unsigned char> in, std::size_t expected,
                                              const std::string& name) {
  std::vector<unsigned char> out(expected);
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw IoError("zlib inflate init failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || produced != expected) {
    throw IoError("corrupt member '" + name + "': deflate stream did not decode");
  }
  return out;
}

inline std::vector<unsigned char> deflate_raw(std::span<const unsigned char> in) {
  z_stream zs{};
  if (deflateInit2(&zs, 6, Z_DEFLATED, -MAX_WBITS, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw IoError("zlib deflate init failed");
  }
  std::vector<unsigned char> out(deflateBound(&zs, static_cast<uLong>(in.size())));
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw IoError("zlib deflate failed");
  out.resize(produced);
  return out;
}

}  // namespace zip_detail

/// Decode every member of a zip archive, in central-directory order.
inline std::vector<ZipMember> unzip(std::span<const unsigned char> archive) {
  using zip_detail::Reader;
  const Reader r(archive);
  if (archive.size() < 22) throw IoError("corrupt zip: too short for an end-of-directory record");

  // End-of-central-directory record, searched backwards past any trailing comment.
  std::size_t end_at = archive.size() - 22;
  while (true) {
    if (r.u(end_at, 4) == zip_detail::kEndSig) break;
    if (end_at == 0 || archive.size() - end_at > 22 + 0xffff) {
      throw IoError("corrupt zip: end-of-directory record not found");
    }
    --end_at;
  }
  std::uint64_t entries = r.u(end_at + 10, 2);
  std::uint64_t dir_at = r.u(end_at + 16, 4);
  if (entries == 0xffff || dir_at == 0xffffffff) {
    // zip64 locator sits right before the classic record
    if (end_at < 20 || r.u(end_at - 20, 4) != 0x07064b50) throw IoError("corrupt zip: missing zip64 locator");
    const std::uint64_t end64_at = r.u(end_at - 20 + 8, 8);
    if (r.u(end64_at, 4) != zip_detail::kEnd64Sig) throw IoError("corrupt zip: bad zip64 record");
    entries = r.u(end64_at + 32, 8);
    dir_at = r.u(end64_at + 48, 8);
  }

  std::vector<ZipMember> members;
  std::size_t at = dir_at;
  for (std::uint64_t e = 0; e < entries; ++e) {
    if (r.u(at, 4) != zip_detail::kCentralSig) throw IoError("corrupt zip: bad central directory entry");
    const auto flags = r.u(at + 8, 2);
    const auto method = r.u(at + 10, 2);
    const auto expected_crc = static_cast<std::uint32_t>(r.u(at + 16, 4));
    std::uint64_t comp_size = r.u(at + 20, 4);
    std::uint64_t size = r.u(at + 24, 4);
    const auto name_len = r.u(at + 28, 2);
    const auto extra_len = r.u(at + 30, 2);
    const auto comment_len = r.u(at + 32, 2);
    std::uint64_t local_at = r.u(at + 42, 4);
    auto name_bytes = r.bytes(at + 46, name_len);
    std::string name(name_bytes.begin(), name_bytes.end());

    // zip64 extended information: present fields follow the order size, comp size, offset
    std::size_t x = at + 46 + name_len;
    const std::size_t x_end = x + extra_len;
    while (x + 4 <= x_end) {
      const auto id = r.u(x, 2);
      const auto len = r.u(x + 2, 2);
      if (id == 0x0001) {
        std::size_t f = x + 4;
        if (size == 0xffffffff) { size = r.u(f, 8); f += 8; }
        if (comp_size == 0xffffffff) { comp_size = r.u(f, 8); f += 8; }
        if (local_at == 0xffffffff) { local_at = r.u(f, 8); }
      }
      x += 4 + len;
    }
    if (flags & 0x1) throw IoError("member '" + name + "' is encrypted");

    if (r.u(local_at, 4) != zip_detail::kLocalSig) throw IoError("corrupt member '" + name + "': bad local header");
    const std::size_t data_at = local_at + 30 + r.u(local_at + 26, 2) + r.u(local_at + 28, 2);
    auto payload = r.bytes(data_at, comp_size);

    std::vector<unsigned char> bytes;
    if (method == 0) {
      if (comp_size != size) throw IoError("corrupt member '" + name + "': stored size mismatch");
      bytes.assign(payload.begin(), payload.end());
    } else if (method == 8) {
      bytes = zip_detail::inflate_raw(payload, size, name);
    } else {
      throw IoError("member '" + name + "' uses unsupported compression method " + std::to_string(method));
    }
    if (zip_detail::crc(bytes) != expected_crc) throw IoError("corrupt member '" + name + "': CRC mismatch");
    members.push_back({std::move(name), std::move(bytes)});
    at += 46 + name_len + extra_len + comment_len;
  }
  return members;
}

/// Encode members into a zip archive. Identical input yields identical bytes.
inline std::vector<unsigned char> zip(std::span<const ZipMember> members, bool compress = true) {
  zip_detail::Writer w;
  struct Entry {
    std::uint32_t crc, comp_size, size, offset;
    std::uint16_t method;
  };
  std::vector<Entry> entries;
  entries.reserve(members.size());
  for (const auto& m : members) {
    if (m.bytes.size() >= 0xffffffffu) throw IoError("member '" + m.name + "' too large for a zip32 archive");
    std::vector<unsigned char> deflated;
    std::uint16_t method = 0;
    if (compress) {
      deflated = zip_detail::deflate_raw(m.bytes);
      if (deflated.size() < m.bytes.size()) method = 8;
    }
    std::span<const unsigned char> payload = method == 8 ? std::span<const unsigned char>(deflated)
                                                          : std::span<const unsigned char>(m.bytes);
    Entry e{zip_detail::crc(m.bytes), static_cast<std::uint32_t>(payload.size()),
            static_cast<std::uint32_t>(m.bytes.size()), static_cast<std::uint32_t>(w.pos()), method};
    w.u32(zip_detail::kLocalSig);
    w.u16(20);
    w.u16(0);
    w.u16(method);
    w.u16(0);
    w.u16(zip_detail::kDosDate);
    w.u32(e.crc);
    w.u32(e.comp_size);
    w.u32(e.size);
    w.u16(static_cast<std::uint32_t>(m.name.size()));
    w.u16(0);
    w.raw(m.name);
    w.raw(payload);
    entries.push_back(e);
  }
  const auto dir_at = static_cast<std::uint32_t>(w.pos());
  for (std::size_t i = 0; i < members.size(); ++i) {
    const auto& e = entries[i];
    w.u32(zip_detail::kCentralSig);
    w.u16(20);
    w.u16(20);
    w.u16(0);
    w.u16(e.method);
    w.u16(0);
    w.u16(zip_detail::kDosDate);
    w.u32(e.crc);
    w.u32(e.comp_size);
    w.u32(e.size);
    w.u16(static_cast<std::uint32_t>(members[i].name.size()));
    w.u16(0);
    w.u16(0);
    w.u16(0);
    w.u16(0);
    w.u32(0);
    w.u32(e.offset);
    w.raw(members[i].name);
  }
  const auto dir_size = static_cast<std::uint32_t>(w.pos() - dir_at);
  w.u32(zip_detail::kEndSig);
  w.u16(0);
  w.u16(0);
  w.u16(static_cast<std::uint32_t>(members.size()));
  w.u16(static_cast<std::uint32_t>(members.size()));
  w.u32(dir_size);
  w.u32(dir_at);
  w.u16(0);
  return w.take();
}

}  // namespace ice

#endif  // ICE_ZIP_HPP
