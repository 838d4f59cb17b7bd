// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "distscale/rng.hpp"

namespace distscale {

enum class TaskKind { count, addition };

inline std::string_view task_name(TaskKind k) {
    return k == TaskKind::count ? "count" : "addition";
}

inline TaskKind task_from_name(std::string_view s) {
    if (s == "count") return TaskKind::count;
    if (s == "addition") return TaskKind::addition;
    throw std::invalid_argument("unknown task: " + std::string(s));
}

/// Token id space for one task. Ids are dense in [0, size). The comma is a
/// real token; surface rendering joins tokens with a space before every
/// token except commas, which reproduces the canonical comma-separated form.
struct Vocab {
    TaskKind kind = TaskKind::count;
    std::int32_t size = 0;
    std::int32_t numeric_max = -1;  // count: largest counting value; ids 0..numeric_max
    std::int32_t n_hints = 0;       // addition: hint symbols a0..a{n_hints-1}
    std::int32_t id_comma = -1;
    std::int32_t id_gt = -1;
    std::int32_t id_plus = -1;  // addition only
    std::int32_t id_sep = -1;   // example separator in packed rows
    std::int32_t id_pad = -1;   // reserved; never generated, never scored

    /// Count vocabulary, fixed at 150 ids: values 0..145 plus ",", ">",
    /// separator, and padding.
    static Vocab for_count() {
        Vocab v;
        v.kind = TaskKind::count;
        v.size = 150;
        v.numeric_max = v.size - 5;  // 145
        v.id_comma = v.numeric_max + 1;
        v.id_gt = v.numeric_max + 2;
        v.id_sep = v.numeric_max + 3;
        v.id_pad = v.numeric_max + 4;
        return v;
    }

    /// Addition vocabulary: digits 0..9, hints a0..a{max_eval_digits-1},
    /// "+", ">", ",", separator, padding.
    static Vocab for_addition(int max_eval_digits) {
        if (max_eval_digits < 1) throw std::invalid_argument("for_addition: max_eval_digits < 1");
        Vocab v;
        v.kind = TaskKind::addition;
        v.n_hints = max_eval_digits;
        v.id_plus = 10 + max_eval_digits;
        v.id_gt = v.id_plus + 1;
        v.id_comma = v.id_gt + 1;
        v.id_sep = v.id_comma + 1;
        v.id_pad = v.id_sep + 1;
        v.size = v.id_pad + 1;
        return v;
    }

    std::int32_t digit_id(int d) const { return d; }
    std::int32_t hint_id(int k) const {
        if (k < 0 || k >= n_hints) throw std::invalid_argument("hint index out of range");
        return 10 + k;
    }

    std::string surface(std::int32_t id) const {
        if (id < 0 || id >= size) throw std::invalid_argument("surface: id out of range");
        if (id == id_comma) return ",";
        if (id == id_gt) return ">";
        if (id == id_plus) return "+";
        if (id == id_sep) return ";";
        if (id == id_pad) return "<pad>";
        if (kind == TaskKind::count) return std::to_string(id);
        if (id < 10) return std::to_string(id);
        return "a" + std::to_string(id - 10);
    }

    std::optional<std::int32_t> id_of(std::string_view s) const {
        if (s == ",") return id_comma;
        if (s == ">") return id_gt;
        if (s == "+" && id_plus >= 0) return id_plus;
        if (s == ";") return id_sep;
        if (s.empty()) return std::nullopt;
        if (s[0] == 'a' && kind == TaskKind::addition) {
            int k = 0;
            for (char c : s.substr(1)) {
                if (c < '0' || c > '9') return std::nullopt;
                k = k * 10 + (c - '0');
            }
            if (s.size() < 2 || k >= n_hints) return std::nullopt;
            return hint_id(k);
        }
        int value = 0;
        for (char c : s) {
            if (c < '0' || c > '9') return std::nullopt;
            value = value * 10 + (c - '0');
        }
        const int max_numeric = kind == TaskKind::count ? numeric_max : 9;
        if (value > max_numeric) return std::nullopt;
        return value;
    }
};

/// One task instance: token sequence plus the index where the answer begins.
struct Example {
    std::vector<std::int32_t> tokens;
    std::int32_t answer_start = 0;
    TaskKind task_kind = TaskKind::count;
    std::int32_t logical_length = 0;

    std::span<const std::int32_t> prompt() const {
        return {tokens.data(), static_cast<std::size_t>(answer_start)};
    }
    std::span<const std::int32_t> answer() const {
        return {tokens.data() + answer_start, tokens.size() - static_cast<std::size_t>(answer_start)};
    }
};

/// Canonical surface form: tokens joined by a leading space except commas.
inline std::string render_tokens(const Vocab& vocab, std::span<const std::int32_t> tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::int32_t id = tokens[i];
        if (id == vocab.id_comma) {
            out += ',';
            continue;
        }
        if (i > 0) out += ' ';
        out += vocab.surface(id);
    }
    return out;
}

inline std::string render_example(const Vocab& vocab, const Example& ex) {
    return render_tokens(vocab, ex.tokens);
}

/// Inverse of render_tokens for single-example lines.
inline std::vector<std::int32_t> parse_surface_line(const Vocab& vocab, std::string_view line) {
    std::vector<std::int32_t> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && line[i] == ' ') ++i;
        if (i >= line.size()) break;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != ',') ++j;
        if (j > i) {
            const auto id = vocab.id_of(line.substr(i, j - i));
            if (!id) throw std::invalid_argument("parse_surface_line: unknown token '" +
                                                 std::string(line.substr(i, j - i)) + "'");
            out.push_back(*id);
        }
        if (j < line.size() && line[j] == ',') {
            out.push_back(vocab.id_comma);
            ++j;
        }
        i = j;
    }
    return out;
}

/// Count example "a, b >, a, a+1, ..., b" for a fixed range.
inline Example make_count_example(int start, int end, const Vocab& vocab) {
    if (start < 0 || end < start || end > vocab.numeric_max)
        throw std::invalid_argument("make_count_example: range outside vocabulary");
    Example ex;
    ex.task_kind = TaskKind::count;
    ex.logical_length = end - start + 1;
    ex.tokens.reserve(5 + 2 * ex.logical_length - 1);
    ex.tokens = {start, vocab.id_comma, end, vocab.id_gt, vocab.id_comma};
    ex.answer_start = static_cast<std::int32_t>(ex.tokens.size());
    for (int v = start; v <= end; ++v) {
        if (v > start) ex.tokens.push_back(vocab.id_comma);
        ex.tokens.push_back(v);
    }
    return ex;
}

/// Sampled count example with length uniform in [min_len, max_len] and the
/// start value uniform over all placements that fit below vocab_numeric_max.
inline Example gen_count_example(Rng& rng, int min_len, int max_len, int vocab_numeric_max,
                                 const Vocab& vocab) {
    if (min_len < 1 || min_len > max_len)
        throw std::invalid_argument("gen_count_example: bad length range");
    if (max_len - 1 > vocab_numeric_max)
        throw std::invalid_argument("gen_count_example: max_len exceeds numeric range");
    const int length = static_cast<int>(rng.uniform_int(min_len, max_len));
    const int start = static_cast<int>(rng.uniform_int(0, vocab_numeric_max - (length - 1)));
    return make_count_example(start, start + length - 1, vocab);
}

namespace detail {

/// Schoolbook digit addition; operands most-significant-first, fixed width.
inline std::vector<int> add_digit_strings(const std::vector<int>& a, const std::vector<int>& b) {
    std::vector<int> sum;
    sum.reserve(a.size() + 1);
    int carry = 0;
    for (std::size_t i = a.size(); i-- > 0;) {
        const int s = a[i] + b[i] + carry;
        sum.push_back(s % 10);
        carry = s / 10;
    }
    if (carry) sum.push_back(carry);
    // least-significant-first at this point; reverse to most-significant-first
    std::vector<int> out(sum.rbegin(), sum.rend());
    return out;
}

}  // namespace detail

/// Addition example from explicit operand digits (most-significant-first,
/// equal width) and hint offset. The answer is emitted least-significant
/// digit first, each digit preceded by its index hint; a carry-out digit
/// takes hint (hint_start - 1), so hint_start must be >= 1 whenever the sum
/// overflows the operand width.
inline Example make_addition_example(const std::vector<int>& a, const std::vector<int>& b,
                                     int hint_start, const Vocab& vocab) {
    const int n = static_cast<int>(a.size());
    if (n < 1 || b.size() != a.size())
        throw std::invalid_argument("make_addition_example: operands must be equal nonzero width");
    if (hint_start < 0 || hint_start + n > vocab.n_hints)
        throw std::invalid_argument("make_addition_example: hint run outside vocabulary");
    const std::vector<int> sum = detail::add_digit_strings(a, b);
    const int m = static_cast<int>(sum.size());
    if (m > n && hint_start == 0)
        throw std::invalid_argument("make_addition_example: carry-out digit needs hint_start >= 1");

    Example ex;
    ex.task_kind = TaskKind::addition;
    ex.logical_length = n;
    ex.tokens.reserve(static_cast<std::size_t>(8 * n + 4 * m + 3));
    auto push_pair = [&](int hint, int digit) {
        ex.tokens.push_back(vocab.hint_id(hint));
        ex.tokens.push_back(vocab.id_comma);
        ex.tokens.push_back(vocab.digit_id(digit));
        ex.tokens.push_back(vocab.id_comma);
    };
    for (int i = 0; i < n; ++i) push_pair(hint_start + i, a[i]);
    ex.tokens.push_back(vocab.id_plus);
    ex.tokens.push_back(vocab.id_comma);
    for (int i = 0; i < n; ++i) push_pair(hint_start + i, b[i]);
    ex.tokens.push_back(vocab.id_gt);
    ex.tokens.push_back(vocab.id_comma);
    ex.answer_start = static_cast<std::int32_t>(ex.tokens.size());
    // reverse order: least significant first; hint index descends from
    // hint_start+n-1 down to hint_start (and one below it on carry-out)
    for (int k = 0; k < m; ++k) {
        const int digit = sum[m - 1 - k];
        const int hint = hint_start + n - 1 - k;
        if (k > 0) ex.tokens.push_back(vocab.id_comma);
        ex.tokens.push_back(vocab.hint_id(hint));
        ex.tokens.push_back(vocab.id_comma);
        ex.tokens.push_back(vocab.digit_id(digit));
    }
    return ex;
}

/// Sampled addition example: fixed-width uniform digits, hint offset uniform
/// over runs fitting in [0, max_eval_digits). When the offset is 0 there is
/// no hint below the run for a carry-out digit, so operand pairs are
/// resampled until the sum stays within width.
inline Example gen_addition_example(Rng& rng, int num_digits, int max_eval_digits,
                                    const Vocab& vocab) {
    if (num_digits < 1 || num_digits > max_eval_digits)
        throw std::invalid_argument("gen_addition_example: num_digits out of range");
    if (max_eval_digits > vocab.n_hints)
        throw std::invalid_argument("gen_addition_example: max_eval_digits exceeds vocabulary hints");
    const int hint_start = static_cast<int>(rng.uniform_int(0, max_eval_digits - num_digits));
    std::vector<int> a(num_digits), b(num_digits);
    while (true) {
        for (int& d : a) d = static_cast<int>(rng.uniform_int(0, 9));
        for (int& d : b) d = static_cast<int>(rng.uniform_int(0, 9));
        if (hint_start > 0) break;
        int carry = 0;  // carry out of the most significant column?
        for (int i = num_digits; i-- > 0;) carry = (a[i] + b[i] + carry) >= 10 ? 1 : 0;
        if (carry == 0) break;
    }
    return make_addition_example(a, b, hint_start, vocab);
}

/// Generation parameters for one task at one training configuration.
struct TaskSpec {
    TaskKind kind = TaskKind::count;
    Vocab vocab;
    int min_len = 1;
    int max_len = 1;
    int max_eval_digits = 0;  // addition only

    static TaskSpec count_task(int max_train_length) {
        TaskSpec s;
        s.kind = TaskKind::count;
        s.vocab = Vocab::for_count();
        s.max_len = max_train_length;
        return s;
    }

    static TaskSpec addition_task(int max_train_length, int max_eval_digits) {
        TaskSpec s;
        s.kind = TaskKind::addition;
        s.vocab = Vocab::for_addition(max_eval_digits);
        s.max_len = max_train_length;
        s.max_eval_digits = max_eval_digits;
        return s;
    }

    Example sample(Rng& rng) const {
        if (kind == TaskKind::count)
            return gen_count_example(rng, min_len, max_len, vocab.numeric_max, vocab);
        return gen_addition_example(rng, static_cast<int>(rng.uniform_int(min_len, max_len)),
                                    max_eval_digits, vocab);
    }

    /// Upper bound on a single sampled example's token count.
    int max_example_tokens() const {
        if (kind == TaskKind::count) return 5 + 2 * max_len - 1;
        return 8 * max_len + 4 * (max_len + 1) + 3;
    }
};

/// Span of one packed example: [start, end) covers the example tokens plus
/// its trailing separator, so spans partition the non-padding prefix.
struct PackedSpan {
    std::int32_t start = 0;
    std::int32_t answer_start = 0;
    std::int32_t end = 0;
};

/// A batch of packed rows. token ids and the loss mask are row-major
/// batch_size x context_length; mask[i] marks positions whose next-token
/// prediction is scored (false wherever the next token is padding).
struct PackedBatch {
    std::int32_t batch_size = 0;
    std::int32_t context_length = 0;
    std::vector<std::int32_t> tokens;
    std::vector<std::uint8_t> loss_mask;
    std::vector<std::vector<PackedSpan>> boundaries;

    std::int32_t token_at(int row, int col) const {
        return tokens[static_cast<std::size_t>(row) * context_length + col];
    }
};

/// Greedily packs freshly sampled examples (each followed by one separator)
/// into a row until the next example would overflow; the remainder is padding.
inline void pack_row(Rng& rng, const TaskSpec& spec, int context_length,
                     std::int32_t* row_tokens, std::uint8_t* row_mask,
                     std::vector<PackedSpan>& spans) {
    if (context_length < spec.max_example_tokens() + 1)
        throw std::invalid_argument("pack_row: context too short for the longest example");
    int cursor = 0;
    while (true) {
        Example ex = spec.sample(rng);
        const int need = static_cast<int>(ex.tokens.size()) + 1;
        if (cursor + need > context_length) break;
        PackedSpan span;
        span.start = cursor;
        span.answer_start = cursor + ex.answer_start;
        for (std::int32_t t : ex.tokens) row_tokens[cursor++] = t;
        row_tokens[cursor++] = spec.vocab.id_sep;
        span.end = cursor;
        spans.push_back(span);
    }
    for (int i = cursor; i < context_length; ++i) row_tokens[i] = spec.vocab.id_pad;
    for (int i = 0; i < context_length; ++i)
        row_mask[i] = (i + 1 < context_length && row_tokens[i + 1] != spec.vocab.id_pad) ? 1 : 0;
}

inline PackedBatch pack_batch(Rng& rng, const TaskSpec& spec, int batch_size, int context_length) {
    if (batch_size < 1) throw std::invalid_argument("pack_batch: batch_size < 1");
    PackedBatch batch;
    batch.batch_size = batch_size;
    batch.context_length = context_length;
    batch.tokens.resize(static_cast<std::size_t>(batch_size) * context_length);
    batch.loss_mask.resize(batch.tokens.size());
    batch.boundaries.resize(batch_size);
    for (int b = 0; b < batch_size; ++b) {
        pack_row(rng, spec, context_length,
                 batch.tokens.data() + static_cast<std::size_t>(b) * context_length,
                 batch.loss_mask.data() + static_cast<std::size_t>(b) * context_length,
                 batch.boundaries[b]);
    }
    return batch;
}

/// Evaluation set at one exact logical length.
inline std::vector<Example> build_eval_set(const TaskSpec& spec, int test_length, int n_items,
                                           Rng& rng) {
    if (n_items < 1) throw std::invalid_argument("build_eval_set: n_items < 1");
    std::vector<Example> out;
    out.reserve(n_items);
    if (spec.kind == TaskKind::count) {
        for (int i = 0; i < n_items; ++i)
            out.push_back(gen_count_example(rng, test_length, test_length,
                                            spec.vocab.numeric_max, spec.vocab));
    } else {
        const int max_eval = std::max(spec.max_eval_digits, test_length);
        for (int i = 0; i < n_items; ++i)
            out.push_back(gen_addition_example(rng, test_length, max_eval, spec.vocab));
    }
    return out;
}

/// Exhaustive count evaluation set: one example per valid start value, i.e.
/// every consecutive length-L range the vocabulary can express.
inline std::vector<Example> build_count_eval_all_starts(int test_length, const Vocab& vocab) {
    if (test_length < 1 || test_length - 1 > vocab.numeric_max)
        throw std::invalid_argument("build_count_eval_all_starts: bad length");
    std::vector<Example> out;
    for (int start = 0; start + test_length - 1 <= vocab.numeric_max; ++start)
        out.push_back(make_count_example(start, start + test_length - 1, vocab));
    return out;
}

}  // namespace distscale
