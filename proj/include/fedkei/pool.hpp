#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "fedkei/digest.hpp"
#include "fedkei/errors.hpp"
#include "fedkei/paramspace.hpp"
#include "fedkei/part.hpp"

namespace fedkei {

struct PoolKey {
  std::size_t client_id = 0;
  std::size_t task_time = 1;
  Part part = Part::adapter;

  /// Canonical order: task time, then client, then part.
  friend auto operator<=>(const PoolKey& a, const PoolKey& b) {
    return std::tuple(a.task_time, a.client_id, static_cast<int>(a.part)) <=>
           std::tuple(b.task_time, b.client_id, static_cast<int>(b.part));
  }
  friend bool operator==(const PoolKey&, const PoolKey&) = default;
};

struct PoolEntry {
  PoolKey key;
  ModuleVector module;

  friend bool operator==(const PoolEntry&, const PoolEntry&) = default;
};

/// Server-side store of every task-specific module received so far.
///
/// Entries are kept sorted by PoolKey, so the column index of a module in any
/// snapshot never changes once later tasks are appended.
class KnowledgePool {
 public:
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<PoolEntry>& entries() const noexcept { return entries_; }

  bool contains(const PoolKey& key) const {
    return std::binary_search(entries_.begin(), entries_.end(), key,
                              [](const auto& a, const auto& b) { return key_of(a) < key_of(b); });
  }

  void insert(PoolEntry entry) {
    if (entry.module.empty()) throw InvalidInput("pool: empty module");
    entry.module.require_finite();
    if (entry.key.task_time < 1) throw InvalidInput("pool: task_time must be >= 1");
    for (const auto& e : entries_) {
      if (e.key.part == entry.key.part) {
        if (e.module.dim() != entry.module.dim()) throw InvalidInput("pool: module dim differs from existing entries");
        break;
      }
    }
    auto it = std::lower_bound(entries_.begin(), entries_.end(), entry.key,
                               [](const PoolEntry& e, const PoolKey& k) { return e.key < k; });
    if (it != entries_.end() && it->key == entry.key) {
      throw ConflictError("pool: entry for client " + std::to_string(entry.key.client_id) + ", task " +
                          std::to_string(entry.key.task_time) + ", " + std::string(to_string(entry.key.part)) +
                          " already present");
    }
    entries_.insert(it, std::move(entry));
  }

  /// Number of `part` modules stored for task times before `t`.
  std::size_t count(Part part, std::size_t t) const {
    return static_cast<std::size_t>(std::count_if(entries_.begin(), entries_.end(), [&](const PoolEntry& e) {
      return e.key.part == part && e.key.task_time < t;
    }));
  }

  /// Keys of the columns snapshot(part, t) would return, in column order.
  std::vector<PoolKey> snapshot_keys(Part part, std::size_t t) const {
    std::vector<PoolKey> keys;
    for (const auto& e : entries_) {
      if (e.key.part == part && e.key.task_time < t) keys.push_back(e.key);
    }
    return keys;
  }

  /// Modules of `part` with task_time < t as matrix columns in canonical order.
  /// Throws EmptyPool when there is no history (always the case at t == 1).
  ModuleMatrix snapshot(Part part, std::size_t t) const {
    if (t < 2) throw EmptyPool("pool: no prior tasks before t=" + std::to_string(t));
    ModuleMatrix m;
    for (const auto& e : entries_) {
      if (e.key.part == part && e.key.task_time < t) m.push_back(e.module);
    }
    if (m.empty()) throw EmptyPool("pool: no stored " + std::string(to_string(part)) + " modules before t=" + std::to_string(t));
    return m;
  }

  friend bool operator==(const KnowledgePool&, const KnowledgePool&) = default;

 private:
  static const PoolKey& key_of(const PoolEntry& e) { return e.key; }
  static const PoolKey& key_of(const PoolKey& k) { return k; }

  std::vector<PoolEntry> entries_;
};

inline std::string pool_file_name(const PoolKey& k) {
  return "c" + std::to_string(k.client_id) + "_t" + std::to_string(k.task_time) + "_" + std::string(to_string(k.part)) +
         ".bin";
}

inline constexpr const char* kPoolManifest = "manifest.txt";

/// Writes the pool as one binary vector file per entry plus a text manifest
/// with one "client_id task_time part file dim crc32" record per line.
inline void save_pool(const KnowledgePool& pool, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InvalidInput("pool: cannot create '" + dir.string() + "': " + ec.message());
  std::ostringstream manifest;
  manifest << "# client_id task_time part file dim crc32\n";
  for (const auto& e : pool.entries()) {
    const auto bytes = serialize(e.module);
    const std::string name = pool_file_name(e.key);
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw InvalidInput("pool: cannot write '" + (dir / name).string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    // Checksum covers the raw f64 payload, not the dim header.
    const auto payload = std::span<const std::uint8_t>(bytes).subspan(4);
    manifest << e.key.client_id << ' ' << e.key.task_time << ' ' << to_string(e.key.part) << ' ' << name << ' '
             << e.module.dim() << ' ' << hex32(crc32_of(payload)) << '\n';
  }
  std::ofstream mf(dir / kPoolManifest, std::ios::binary);
  if (!mf) throw InvalidInput("pool: cannot write manifest in '" + dir.string() + "'");
  mf << manifest.str();
}

inline KnowledgePool load_pool(const std::filesystem::path& dir) {
  std::ifstream mf(dir / kPoolManifest, std::ios::binary);
  if (!mf) throw InvalidInput("pool: missing manifest in '" + dir.string() + "'");
  KnowledgePool pool;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(mf, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    PoolKey key;
    std::string part, file, crc;
    std::size_t dim = 0;
    if (!(is >> key.client_id >> key.task_time >> part >> file >> dim >> crc)) {
      throw InvalidInput("pool: malformed manifest line " + std::to_string(lineno));
    }
    key.part = part_from_string(part);
    std::ifstream in(dir / file, std::ios::binary);
    if (!in) throw InvalidInput("pool: missing vector file '" + file + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 4 || hex32(crc32_of(std::span<const std::uint8_t>(bytes).subspan(4))) != crc) {
      throw InvalidInput("pool: checksum mismatch for '" + file + "'");
    }
    auto v = deserialize(bytes);
    if (v.dim() != dim) throw InvalidInput("pool: dim mismatch for '" + file + "'");
    pool.insert({key, std::move(v)});
  }
  return pool;
}

}  // namespace fedkei
