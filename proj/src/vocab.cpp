#include "dblend/vocab.hpp"

#include <cstdio>

#include "dblend/error.hpp"

namespace dblend {

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

Vocabulary::Vocabulary()
    : tokens_{"<null>", "<pad>",   "<sks>",   "circle",   "square", "triangle", "cross", "diamond", "plain",
              "stripes", "checker", "gradient", "noise",  "left",   "right",    "top",   "bottom",  "center"} {
    std::string joined;
    for (const auto& t : tokens_) joined += t + "\n";
    hash_ = fnv1a64(joined);
}

const Vocabulary& Vocabulary::standard() {
    static const Vocabulary v;
    return v;
}

const std::string& Vocabulary::token(int id) const {
    require(contains(id), ErrorCode::invalid_argument, "unknown token id " + std::to_string(id));
    return tokens_[std::size_t(id)];
}

int Vocabulary::id(std::string_view token) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i)
        if (tokens_[i] == token) return int(i);
    if (token == "sks") return sks_id;
    fail(ErrorCode::invalid_argument, "unknown token '" + std::string(token) + "'");
}

bool Vocabulary::in_slot(int id, Slot slot) const {
    switch (slot) {
        case Slot::object: return id == sks_id || (id >= first_object && id < first_object + kinds_per_slot);
        case Slot::background: return id >= first_background && id < first_background + kinds_per_slot;
        case Slot::position: return id >= first_position && id < first_position + kinds_per_slot;
    }
    return false;
}

Prompt Prompt::make(std::string_view object, std::string_view background, std::string_view position) {
    const Vocabulary& v = Vocabulary::standard();
    Prompt p;
    p.ids = {v.id(object), v.id(background), v.id(position), Vocabulary::pad_id};
    p.validate();
    return p;
}

Prompt Prompt::null() {
    Prompt p;
    p.ids.fill(Vocabulary::null_id);
    return p;
}

Prompt Prompt::parse(std::string_view text) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : text) {
        if (c == ',' || c == ' ') {
            if (!cur.empty()) parts.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) parts.push_back(cur);
    if (parts.size() == 4 && parts[3] == "<pad>") parts.pop_back();
    require(parts.size() == 3, ErrorCode::invalid_argument,
            "prompt must be 'object,background,position', got '" + std::string(text) + "'");
    return make(parts[0], parts[1], parts[2]);
}

bool Prompt::is_null() const noexcept {
    for (int id : ids)
        if (id != Vocabulary::null_id) return false;
    return true;
}

void Prompt::validate() const {
    const Vocabulary& v = Vocabulary::standard();
    for (int id : ids) require(v.contains(id), ErrorCode::invalid_argument, "prompt token id out of vocabulary");
    if (is_null()) return;
    require(v.in_slot(ids[0], Slot::object) && v.in_slot(ids[1], Slot::background) &&
                v.in_slot(ids[2], Slot::position) && ids[3] == Vocabulary::pad_id,
            ErrorCode::invalid_argument, "prompt tokens do not fit (object, background, position, <pad>): " + str());
}

std::string Prompt::str() const {
    const Vocabulary& v = Vocabulary::standard();
    std::string s;
    for (std::size_t i = 0; i < length; ++i) {
        if (i) s += ' ';
        s += v.contains(ids[i]) ? v.token(ids[i]) : "?";
    }
    return s;
}

}  // namespace dblend
