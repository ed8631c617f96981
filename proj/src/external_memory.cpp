#include "pema/external_memory.h"

#include <algorithm>
#include <cstdint>
#include <set>

#include "pema/errors.h"
#include "pema/log.h"

namespace pema {

namespace {

constexpr std::string_view kMagic = "PEMA";
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kMaxPosition = 0xffff;

bool check_pair(const ParallelPair& pair) {
  if (pair.source.empty()) {
    throw InputError("pair " + std::to_string(pair.id) + " has an empty source");
  }
  if (pair.target.empty()) {
    log::warning("skipping pair " + std::to_string(pair.id) + ": empty target");
    return false;
  }
  if (pair.target.size() > kMaxPosition) {
    throw InputError("pair " + std::to_string(pair.id) + " has more than 65535 target tokens");
  }
  return true;
}

template <typename Encode>
void build_sentence(Encode&& encode, const Vocab& vocab, const PromptTemplate& tmpl,
                    const ParallelPair& pair, BuildMode mode, std::vector<ContextRecord>& out) {
  auto context = assemble_prompt(vocab, tmpl, pair.source).tokens;
  const std::size_t t = pair.target.size();
  for (std::size_t i = 0; i < t; ++i) {
    EncodeResult enc = encode(context);
    ContextRecord rec;
    rec.representation.assign(enc.representation.begin(), enc.representation.end());
    rec.target = pair.target[i];
    rec.sentence_id = pair.id;
    rec.position = static_cast<std::uint16_t>(i + 1);
    rec.sentence_len = static_cast<std::uint16_t>(t);
    out.push_back(std::move(rec));
    context.push_back(mode == BuildMode::kPredicted ? enc.predicted : pair.target[i]);
  }
}

}  // namespace

BuildMode parse_build_mode(std::string_view name) {
  if (name == "predicted") return BuildMode::kPredicted;
  if (name == "teacher") return BuildMode::kTeacher;
  throw ConfigError("unknown memory build mode '" + std::string(name) +
                    "' (expected predicted or teacher)");
}

std::string_view build_mode_name(BuildMode mode) {
  return mode == BuildMode::kPredicted ? "predicted" : "teacher";
}

std::size_t ExternalMemory::sentence_count() const {
  std::set<std::uint32_t> ids;
  for (const auto& r : records) ids.insert(r.sentence_id);
  return ids.size();
}

ExternalMemory build_memory_serial(ContextEncoder& encoder, const Vocab& vocab,
                                   const PromptTemplate& tmpl,
                                   std::span<const ParallelPair> pairs, BuildMode mode,
                                   const SentenceCallback& on_sentence) {
  if (pairs.empty()) throw InputError("cannot build external memory from zero pairs");
  ExternalMemory memory;
  memory.d = encoder.representation_size();
  memory.v = encoder.vocab_size();
  memory.mode = mode;
  for (const auto& pair : pairs) {
    if (!check_pair(pair)) continue;
    build_sentence([&](std::span<const TokenId> c) { return encoder.encode(c); }, vocab, tmpl,
                   pair, mode, memory.records);
    if (on_sentence) on_sentence(pair.id);
  }
  return memory;
}

ExternalMemory build_memory(const ToyPLM& plm, const Vocab& vocab, const PromptTemplate& tmpl,
                            std::span<const ParallelPair> pairs, BuildMode mode) {
  if (!plm.frozen()) throw ContractError("external memory must be built from a frozen PLM");
  if (pairs.empty()) throw InputError("cannot build external memory from zero pairs");

  std::vector<char> keep(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) keep[i] = check_pair(pairs[i]) ? 1 : 0;

  std::vector<std::vector<ContextRecord>> per_sentence(pairs.size());
  const auto n = static_cast<std::int64_t>(pairs.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (std::int64_t s = 0; s < n; ++s) {
    const auto idx = static_cast<std::size_t>(s);
    if (!keep[idx]) continue;
    build_sentence([&](std::span<const TokenId> c) { return plm.encode(c); }, vocab, tmpl,
                   pairs[idx], mode, per_sentence[idx]);
  }

  ExternalMemory memory;
  memory.d = plm.config().d;
  memory.v = plm.config().v;
  memory.mode = mode;
  for (auto& records : per_sentence) {
    std::move(records.begin(), records.end(), std::back_inserter(memory.records));
  }
  return memory;
}

void write_memory(const ExternalMemory& memory, const std::string& path) {
  binio::Writer w(path);
  w.magic(kMagic);
  w.u16(kVersion);
  w.u8(static_cast<std::uint8_t>(memory.mode));
  w.u32(static_cast<std::uint32_t>(memory.d));
  w.u32(static_cast<std::uint32_t>(memory.v));
  w.u64(memory.records.size());
  for (const auto& rec : memory.records) {
    if (rec.representation.size() != memory.d) {
      throw DimensionError("record of width " + std::to_string(rec.representation.size()) +
                           " in a memory of width " + std::to_string(memory.d));
    }
    w.f32_block(std::span<const float>(rec.representation));
    w.u32(rec.target);
    w.u32(rec.sentence_id);
    w.u16(rec.position);
    w.u16(rec.sentence_len);
  }
  w.finish(path);
}

MemoryReader::MemoryReader(const std::string& path, std::optional<std::size_t> expected_d)
    : reader_(path) {
  reader_.expect_magic(kMagic, "PEMA magic");
  const auto version = reader_.u16("PEMA version");
  if (version != kVersion) {
    throw FormatError("unsupported PEMA version " + std::to_string(version),
                      reader_.offset() - 2);
  }
  const auto mode = reader_.u8("build mode");
  if (mode > 1) throw FormatError("unknown build mode " + std::to_string(mode), reader_.offset() - 1);
  mode_ = static_cast<BuildMode>(mode);
  const std::uint64_t d_at = reader_.offset();
  d_ = reader_.u32("d");
  v_ = reader_.u32("v");
  if (d_ == 0 || d_ > (1u << 16)) throw FormatError("implausible representation width", d_at);
  if (expected_d && *expected_d != d_) {
    throw FormatError("memory width " + std::to_string(d_) + " does not match expected " +
                          std::to_string(*expected_d),
                      d_at);
  }
  count_ = reader_.u64("record count");
}

std::optional<ContextRecord> MemoryReader::next() {
  if (read_ == count_) {
    if (!reader_.at_end()) {
      throw FormatError("trailing bytes after " + std::to_string(count_) + " records",
                        reader_.offset());
    }
    return std::nullopt;
  }
  ContextRecord rec;
  rec.representation.resize(d_);
  const std::string what = "record " + std::to_string(read_);
  reader_.f32_block(std::span<float>(rec.representation), what);
  rec.target = reader_.u32(what);
  rec.sentence_id = reader_.u32(what);
  rec.position = reader_.u16(what);
  rec.sentence_len = reader_.u16(what);
  if (rec.position == 0 || rec.position > rec.sentence_len) {
    throw FormatError(what + " has position outside its sentence", reader_.offset() - 4);
  }
  ++read_;
  return rec;
}

ExternalMemory read_memory(const std::string& path, std::optional<std::size_t> expected_d) {
  MemoryReader reader(path, expected_d);
  ExternalMemory memory;
  memory.d = reader.d();
  memory.v = reader.v();
  memory.mode = reader.mode();
  memory.records.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(reader.record_count(), 1u << 20)));
  while (auto rec = reader.next()) memory.records.push_back(std::move(*rec));
  return memory;
}

}  // namespace pema
