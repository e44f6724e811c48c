// SPDX-License-Identifier: Apache-2.0
#include "vilbert/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace vilbert {

namespace {

constexpr char kMagic[8] = {'V', 'L', 'B', 'R', 'T', 'C', 'K', '1'};

// little-endian primitives
void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_i64(std::string& buf, int64_t v) { put_u64(buf, static_cast<uint64_t>(v)); }
void put_real(std::string& buf, real v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  put_u64(buf, bits);
}
void put_str(std::string& buf, const std::string& s) {
  put_u32(buf, static_cast<uint32_t>(s.size()));
  buf.append(s);
}
void put_real_vec(std::string& buf, std::span<const real> v) {
  put_u64(buf, v.size());
  for (real x : v) put_real(buf, x);
}

class Reader {
 public:
  Reader(const std::string& data, size_t offset) : data_(data), pos_(offset) {}
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(data_[pos_++]);
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<uint64_t>(static_cast<unsigned char>(data_[pos_ + static_cast<size_t>(i)]))
           << (8 * i);
    }
    pos_ += 8;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<uint32_t>(static_cast<unsigned char>(data_[pos_ + static_cast<size_t>(i)]))
           << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  int64_t i64() { return static_cast<int64_t>(u64()); }
  real real_val() {
    const uint64_t bits = u64();
    real v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
  std::string str() {
    const uint32_t len = u32();
    need(len);
    std::string s = data_.substr(pos_, len);
    pos_ += len;
    return s;
  }
  std::vector<real> real_vec() {
    const uint64_t n = u64();
    std::vector<real> v(n);
    for (auto& x : v) x = real_val();
    return v;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(size_t n) {
    if (pos_ + n > data_.size()) {
      throw ParseError("checkpoint truncated");
    }
  }
  const std::string& data_;
  size_t pos_;
};

}  // namespace

void Checkpoint::capture_params(const ParamMap& params) {
  tensors.clear();
  for (const auto& [name, t] : params.items()) {
    tensors.emplace_back(name, t.detach());
  }
}

void Checkpoint::restore_params(ParamMap& params) const {
  if (tensors.size() != params.items().size()) {
    throw ContractError("checkpoint holds " + std::to_string(tensors.size()) +
                        " tensors but the model has " +
                        std::to_string(params.items().size()));
  }
  for (size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, stored] = tensors[i];
    const auto& [live_name, live] = params.items()[i];
    if (name != live_name) {
      throw ContractError("checkpoint tensor '" + name +
                          "' does not match model parameter '" + live_name +
                          "'");
    }
    if (stored.shape() != live.shape()) {
      throw ContractError("checkpoint tensor '" + name + "' has shape " +
                          shape_str(stored.shape()) + ", model expects " +
                          shape_str(live.shape()));
    }
    auto dst = live.node();
    const auto src = stored.data();
    std::copy(src.begin(), src.end(), dst->value.begin());
  }
}

std::string Checkpoint::config_value(const std::string& key) const {
  for (const auto& [k, v] : config_kv) {
    if (k == key) return v;
  }
  throw ContractError("checkpoint config has no key '" + key + "'");
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string payload;
  put_u64(payload, ckpt.format_version);

  put_u32(payload, static_cast<uint32_t>(ckpt.config_kv.size()));
  for (const auto& [k, v] : ckpt.config_kv) {
    put_str(payload, k);
    put_str(payload, v);
  }

  put_u32(payload, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_str(payload, name);
    put_u32(payload, static_cast<uint32_t>(t.rank()));
    for (int64_t e : t.shape()) put_i64(payload, e);
    put_real_vec(payload, t.data());
  }

  payload.push_back(ckpt.has_optimizer ? '\1' : '\0');
  if (ckpt.has_optimizer) {
    if (ckpt.adam_m.size() != ckpt.tensors.size() ||
        ckpt.adam_v.size() != ckpt.tensors.size()) {
      throw ContractError("optimizer moment count does not match tensors");
    }
    put_i64(payload, ckpt.adam_step);
    put_real(payload, ckpt.adam_cfg.beta1);
    put_real(payload, ckpt.adam_cfg.beta2);
    put_real(payload, ckpt.adam_cfg.eps);
    for (size_t i = 0; i < ckpt.adam_m.size(); ++i) {
      put_real_vec(payload, ckpt.adam_m[i]);
      put_real_vec(payload, ckpt.adam_v[i]);
    }
  }

  put_real(payload, ckpt.schedule.peak_lr);
  put_i64(payload, ckpt.schedule.warmup_steps);
  put_i64(payload, ckpt.schedule.total_steps);
  put_i64(payload, ckpt.next_epoch);
  put_i64(payload, ckpt.total_epochs);
  put_u64(payload, ckpt.run_seed);
  for (uint64_t w : ckpt.rng_state) put_u64(payload, w);

  put_u32(payload, static_cast<uint32_t>(ckpt.history.size()));
  for (const auto& row : ckpt.history) {
    put_i64(payload, row.epoch);
    put_str(payload, row.split);
    put_str(payload, row.metric);
    put_real(payload, row.value);
  }

  Fnv1a64 h;
  h.update(payload.data(), payload.size());

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  std::string header;
  put_u64(header, h.digest());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (data.size() < sizeof(kMagic) + 8 ||
      std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("'" + path + "' is not a checkpoint file");
  }
  Reader header(data, sizeof(kMagic));
  const uint64_t stored_sum = header.u64();
  Fnv1a64 h;
  h.update(data.data() + sizeof(kMagic) + 8, data.size() - sizeof(kMagic) - 8);
  if (h.digest() != stored_sum) {
    throw IoError("checkpoint '" + path +
                  "' failed its integrity check (corrupted file)");
  }

  Reader r(data, sizeof(kMagic) + 8);
  Checkpoint ckpt;
  ckpt.format_version = r.u64();
  if (ckpt.format_version != 1) {
    throw ContractError("checkpoint format version " +
                        std::to_string(ckpt.format_version) +
                        " unsupported (this build reads version 1)");
  }
  const uint32_t kv_count = r.u32();
  for (uint32_t i = 0; i < kv_count; ++i) {
    std::string k = r.str();
    std::string v = r.str();
    ckpt.config_kv.emplace_back(std::move(k), std::move(v));
  }
  const uint32_t tensor_count = r.u32();
  for (uint32_t i = 0; i < tensor_count; ++i) {
    std::string name = r.str();
    const uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& e : shape) e = r.i64();
    std::vector<real> vals = r.real_vec();
    ckpt.tensors.emplace_back(
        std::move(name), Tensor::from_data(std::move(shape), std::move(vals)));
  }

  ckpt.has_optimizer = r.u8() != 0;
  if (ckpt.has_optimizer) {
    ckpt.adam_step = r.i64();
    ckpt.adam_cfg.beta1 = r.real_val();
    ckpt.adam_cfg.beta2 = r.real_val();
    ckpt.adam_cfg.eps = r.real_val();
    ckpt.adam_m.resize(ckpt.tensors.size());
    ckpt.adam_v.resize(ckpt.tensors.size());
    for (size_t i = 0; i < ckpt.tensors.size(); ++i) {
      ckpt.adam_m[i] = r.real_vec();
      ckpt.adam_v[i] = r.real_vec();
    }
  }

  ckpt.schedule.peak_lr = r.real_val();
  ckpt.schedule.warmup_steps = r.i64();
  ckpt.schedule.total_steps = r.i64();
  ckpt.next_epoch = r.i64();
  ckpt.total_epochs = r.i64();
  ckpt.run_seed = r.u64();
  for (auto& w : ckpt.rng_state) w = r.u64();

  const uint32_t row_count = r.u32();
  ckpt.history.reserve(row_count);
  for (uint32_t i = 0; i < row_count; ++i) {
    MetricRow row;
    row.epoch = r.i64();
    row.split = r.str();
    row.metric = r.str();
    row.value = r.real_val();
    ckpt.history.push_back(std::move(row));
  }
  if (!r.done()) {
    throw ParseError("checkpoint '" + path + "' has trailing bytes");
  }
  return ckpt;
}

}  // namespace vilbert
