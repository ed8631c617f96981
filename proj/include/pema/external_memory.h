#ifndef PEMA_EXTERNAL_MEMORY_H
#define PEMA_EXTERNAL_MEMORY_H

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pema/binary_io.h"
#include "pema/corpus.h"
#include "pema/toy_plm.h"

namespace pema {

// One (f(c_i), y_i) pair. Representations are kept at storage precision.
struct ContextRecord {
  std::vector<float> representation;
  TokenId target = 0;
  std::uint32_t sentence_id = 0;
  std::uint16_t position = 0;      // i, 1-based
  std::uint16_t sentence_len = 0;  // t_n

  friend bool operator==(const ContextRecord&, const ContextRecord&) = default;
};

// How the context is extended after each target position.
enum class BuildMode : std::uint8_t {
  kPredicted = 0,  // c_{i+1} = c_i + w_hat_i
  kTeacher = 1,    // c_{i+1} = c_i + y_i
};

BuildMode parse_build_mode(std::string_view name);
std::string_view build_mode_name(BuildMode mode);

struct ExternalMemory {
  std::size_t d = 0;
  std::size_t v = 0;
  BuildMode mode = BuildMode::kPredicted;
  std::vector<ContextRecord> records;

  std::size_t sentence_count() const;

  friend bool operator==(const ExternalMemory&, const ExternalMemory&) = default;
};

using SentenceCallback = std::function<void(std::uint32_t sentence_id)>;

// Reference builder over any encoder, one sentence after another. Every pair
// runs exactly |target| steps, even past a predicted EOS. `on_sentence` fires
// after each completed sentence.
ExternalMemory build_memory_serial(ContextEncoder& encoder, const Vocab& vocab,
                                   const PromptTemplate& tmpl,
                                   std::span<const ParallelPair> pairs, BuildMode mode,
                                   const SentenceCallback& on_sentence = {});

// Same result as the serial builder over a LocalEncoder; sentences are built
// in OpenMP workers and merged in pair order.
ExternalMemory build_memory(const ToyPLM& plm, const Vocab& vocab, const PromptTemplate& tmpl,
                            std::span<const ParallelPair> pairs,
                            BuildMode mode = BuildMode::kPredicted);

// PEMA file format (little-endian):
//   "PEMA" u16 version, u8 mode, u32 d, u32 v, u64 count,
//   count x { d x f32, u32 target, u32 sentence_id, u16 position, u16 sentence_len }
void write_memory(const ExternalMemory& memory, const std::string& path);

// Streams records without loading the whole file.
class MemoryReader {
 public:
  explicit MemoryReader(const std::string& path,
                        std::optional<std::size_t> expected_d = std::nullopt);

  std::size_t d() const { return d_; }
  std::size_t v() const { return v_; }
  BuildMode mode() const { return mode_; }
  std::uint64_t record_count() const { return count_; }

  // Next record, or nullopt after the last one. Throws FormatError on
  // truncation or trailing bytes.
  std::optional<ContextRecord> next();

 private:
  binio::Reader reader_;
  std::size_t d_ = 0;
  std::size_t v_ = 0;
  BuildMode mode_ = BuildMode::kPredicted;
  std::uint64_t count_ = 0;
  std::uint64_t read_ = 0;
};

ExternalMemory read_memory(const std::string& path,
                           std::optional<std::size_t> expected_d = std::nullopt);

}  // namespace pema

#endif  // PEMA_EXTERNAL_MEMORY_H
