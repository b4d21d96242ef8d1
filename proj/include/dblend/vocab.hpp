#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace dblend {

enum class Slot { object, background, position };

// Fixed glyph-world vocabulary. Ids are dense from 0 and never change.
class Vocabulary {
   public:
    static const Vocabulary& standard();

    std::size_t size() const noexcept { return tokens_.size(); }
    const std::string& token(int id) const;
    int id(std::string_view token) const;  // throws on unknown tokens
    bool contains(int id) const noexcept { return id >= 0 && std::size_t(id) < tokens_.size(); }
    bool in_slot(int id, Slot slot) const;
    std::uint64_t hash() const noexcept { return hash_; }

    static constexpr int null_id = 0;
    static constexpr int pad_id = 1;
    static constexpr int sks_id = 2;
    static constexpr int first_object = 3;
    static constexpr int first_background = 8;
    static constexpr int first_position = 13;
    static constexpr int kinds_per_slot = 5;

   private:
    Vocabulary();
    std::vector<std::string> tokens_;
    std::uint64_t hash_ = 0;
};

// Tokenized prompt: (object, background, position, <pad>). The object slot
// may hold <sks>; the all-<null> prompt is the unconditional input.
struct Prompt {
    static constexpr std::size_t length = 4;
    std::array<int, length> ids{};

    static Prompt make(std::string_view object, std::string_view background, std::string_view position);
    static Prompt null();
    // "object,background,position"; "sks" and "<sks>" are both accepted.
    static Prompt parse(std::string_view text);

    int object() const noexcept { return ids[0]; }
    int background() const noexcept { return ids[1]; }
    int position() const noexcept { return ids[2]; }
    bool is_null() const noexcept;
    void validate() const;
    std::string str() const;

    bool operator==(const Prompt&) const = default;
};

std::string hash_hex(std::uint64_t h);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace dblend
