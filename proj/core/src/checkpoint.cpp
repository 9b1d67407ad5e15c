#include "iop/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace iop {

namespace {

constexpr uint64_t kMagic = 0x31544b4350504f49ULL;  // "IOPCKPT1"
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw std::runtime_error("checkpoint truncated");
  return v;
}

void put_doubles(std::ofstream& f, const std::vector<double>& v) {
  f.write(reinterpret_cast<const char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void get_doubles(std::ifstream& f, std::vector<double>& v, size_t n) {
  v.resize(n);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!f) throw std::runtime_error("checkpoint truncated");
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  // Untouched optimizer state (no update yet) serializes as "no moments".
  const bool with_adam = ck.adam.has_value() && ck.adam->m.size() == ck.params.w.size();
  put(f, kMagic);
  put(f, kVersion);
  put(f, static_cast<uint32_t>(ck.params.arch.vocab_size));
  put(f, static_cast<uint32_t>(ck.params.arch.context_len));
  put(f, static_cast<uint32_t>(ck.params.arch.hidden));
  put(f, static_cast<uint32_t>(ck.params.arch.heads));
  put(f, static_cast<uint32_t>(ck.params.arch.layers));
  put(f, static_cast<uint64_t>(ck.step));
  put(f, ck.master_seed);
  put(f, static_cast<uint8_t>(with_adam ? 1 : 0));
  put(f, static_cast<uint64_t>(ck.params.w.size()));
  put_doubles(f, ck.params.w);
  if (with_adam) {
    put(f, static_cast<uint64_t>(ck.adam->t));
    put_doubles(f, ck.adam->m);
    put_doubles(f, ck.adam->v);
  }
  put(f, static_cast<uint32_t>(ck.trailer.size()));
  f.write(ck.trailer.data(), static_cast<std::streamsize>(ck.trailer.size()));
  if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  if (get<uint64_t>(f) != kMagic) throw std::runtime_error("not a checkpoint file: " + path);
  if (get<uint32_t>(f) != kVersion) throw std::runtime_error("unsupported checkpoint version");
  Checkpoint ck;
  ck.params.arch.vocab_size = static_cast<int>(get<uint32_t>(f));
  ck.params.arch.context_len = static_cast<int>(get<uint32_t>(f));
  ck.params.arch.hidden = static_cast<int>(get<uint32_t>(f));
  ck.params.arch.heads = static_cast<int>(get<uint32_t>(f));
  ck.params.arch.layers = static_cast<int>(get<uint32_t>(f));
  ck.step = static_cast<int64_t>(get<uint64_t>(f));
  ck.master_seed = get<uint64_t>(f);
  bool has_adam = get<uint8_t>(f) != 0;
  size_t n = static_cast<size_t>(get<uint64_t>(f));
  if (n != static_cast<size_t>(ck.params.arch.param_count()))
    throw std::runtime_error("checkpoint parameter count does not match its arch");
  get_doubles(f, ck.params.w, n);
  if (has_adam) {
    AdamState a;
    a.t = static_cast<int64_t>(get<uint64_t>(f));
    get_doubles(f, a.m, n);
    get_doubles(f, a.v, n);
    ck.adam = std::move(a);
  }
  uint32_t tlen = get<uint32_t>(f);
  ck.trailer.resize(tlen);
  if (tlen > 0) {
    f.read(ck.trailer.data(), tlen);
    if (!f) throw std::runtime_error("checkpoint truncated");
  }
  return ck;
}

}  // namespace iop
