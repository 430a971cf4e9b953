#include "dape/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <memory>
#include <stdexcept>

namespace dape {

namespace {

const char* kTaskNames[] = {
    "even_pairs",        "modular_arithmetic_simple",
    "parity_check",      "cycle_navigation",
    "stack_manipulation", "reverse_string",
    "modular_arithmetic", "solve_equation",
    "duplicate_string",  "missing_duplicate",
    "odds_first",        "binary_addition",
    "compute_sqrt",      "bucket_sort"};

constexpr int kModulus = 5;

}  // namespace

const std::vector<TaskId>& all_tasks() {
    static const std::vector<TaskId> tasks = [] {
        std::vector<TaskId> out;
        for (int i = 0; i < 14; ++i) out.push_back(static_cast<TaskId>(i));
        return out;
    }();
    return tasks;
}

std::string task_name(TaskId id) { return kTaskNames[static_cast<int>(id)]; }

TaskId task_from_name(const std::string& name) {
    for (int i = 0; i < 14; ++i)
        if (name == kTaskNames[i]) return static_cast<TaskId>(i);
    throw std::runtime_error("config error: unknown task '" + name + "'");
}

TaskSpec task_spec(TaskId id) {
    TaskSpec spec;
    spec.id = id;
    switch (id) {
        case TaskId::even_pairs:
        case TaskId::modular_arithmetic_simple:
        case TaskId::parity_check:
        case TaskId::cycle_navigation:
            spec.cls = TaskClass::regular;
            break;
        case TaskId::stack_manipulation:
        case TaskId::reverse_string:
        case TaskId::modular_arithmetic:
        case TaskId::solve_equation:
            spec.cls = TaskClass::dcf;
            break;
        default:
            spec.cls = TaskClass::cs;
            break;
    }
    spec.permutation_invariant = id == TaskId::parity_check || id == TaskId::cycle_navigation ||
                                 id == TaskId::bucket_sort;
    return spec;
}

double random_baseline(TaskId id) {
    switch (id) {
        case TaskId::modular_arithmetic_simple:
        case TaskId::cycle_navigation:
        case TaskId::bucket_sort:
        case TaskId::solve_equation:
        case TaskId::modular_arithmetic:
            return 0.2;
        default:
            return 0.5;
    }
}

int TaskVocab::id_of(const std::string& tok) const {
    for (int i = 0; i < size(); ++i)
        if (tokens[i] == tok) return i;
    throw std::runtime_error("contract error: token '" + tok + "' not in vocabulary");
}

namespace {

TaskVocab make_vocab(std::vector<std::string> symbols, std::vector<std::string> outputs) {
    TaskVocab v;
    v.tokens = std::move(symbols);
    v.placeholder_id = v.size();
    v.tokens.push_back("<ph>");
    v.pad_id = v.size();
    v.tokens.push_back("<pad>");
    for (const auto& o : outputs) v.output_ids.push_back(v.id_of(o));
    return v;
}

}  // namespace

TaskVocab task_vocab(TaskId id) {
    switch (id) {
        case TaskId::even_pairs:
        case TaskId::parity_check:
            return make_vocab({"a", "b", "True", "False"}, {"True", "False"});
        case TaskId::modular_arithmetic_simple:
            return make_vocab({"0", "1", "2", "3", "4", "+", "-"}, {"0", "1", "2", "3", "4"});
        case TaskId::cycle_navigation:
            return make_vocab({"0", "1", "2", "3", "4"}, {"0", "1", "2", "3", "4"});
        case TaskId::stack_manipulation:
            return make_vocab({"a", "b", "POP", "PUSH_a", "PUSH_b"}, {"a", "b"});
        case TaskId::reverse_string:
        case TaskId::duplicate_string:
        case TaskId::odds_first:
            return make_vocab({"a", "b"}, {"a", "b"});
        case TaskId::modular_arithmetic:
            return make_vocab({"0", "1", "2", "3", "4", "+", "-", "*", "(", ")"},
                              {"0", "1", "2", "3", "4"});
        case TaskId::solve_equation:
            return make_vocab({"0", "1", "2", "3", "4", "+", "-", "*", "(", ")", "x", "="},
                              {"0", "1", "2", "3", "4"});
        case TaskId::missing_duplicate:
            return make_vocab({"0", "1", "2"}, {"0", "1"});
        case TaskId::binary_addition:
            return make_vocab({"0", "1", "+"}, {"0", "1"});
        case TaskId::compute_sqrt:
            return make_vocab({"0", "1"}, {"0", "1"});
        case TaskId::bucket_sort:
            return make_vocab({"0", "1", "2", "3", "4"}, {"0", "1", "2", "3", "4"});
    }
    throw std::runtime_error("contract error: bad task id");
}

int feasible_length(TaskId id, int length) {
    if (length < 1) throw std::runtime_error("contract error: task length must be >= 1");
    switch (id) {
        case TaskId::modular_arithmetic_simple:
            return length % 2 == 1 ? length : length - 1;  // digit (op digit)* chains
        case TaskId::missing_duplicate:
            if (length < 2) return 2;
            return length % 2 == 0 ? length : length - 1;
        case TaskId::solve_equation:
            return std::max(length, 3);  // expr '=' digit
        case TaskId::binary_addition:
            return std::max(length, 3);  // a '+' b
        default:
            return length;
    }
}

int sample_training_length(int n_max, Rng& rng) {
    if (n_max < 1) throw std::runtime_error("contract error: length bound must be >= 1");
    return rng.uniform_int(1, n_max);
}

// ---------------------------------------------------------------------------
// modular arithmetic expressions
// ---------------------------------------------------------------------------

namespace {

struct Expr {
    enum Kind { digit, variable, negate, binop } kind = digit;
    int value = 0;
    char op = '+';
    bool neg_parens = false;  // render as -(e) even when e is atomic
    std::unique_ptr<Expr> lhs, rhs;
};

int norm5(long v) { return static_cast<int>(((v % kModulus) + kModulus) % kModulus); }

int eval_expr(const Expr& e, int x_value) {
    switch (e.kind) {
        case Expr::digit: return e.value;
        case Expr::variable: return x_value;
        case Expr::negate: return norm5(-static_cast<long>(eval_expr(*e.lhs, x_value)));
        case Expr::binop: {
            long l = eval_expr(*e.lhs, x_value), r = eval_expr(*e.rhs, x_value);
            if (e.op == '+') return norm5(l + r);
            if (e.op == '-') return norm5(l - r);
            return norm5(l * r);
        }
    }
    throw std::runtime_error("contract error: bad expression node");
}

void render_expr(const Expr& e, std::vector<std::string>& out) {
    switch (e.kind) {
        case Expr::digit: out.push_back(std::string(1, char('0' + e.value))); return;
        case Expr::variable: out.push_back("x"); return;
        case Expr::negate:
            out.push_back("-");
            if (e.neg_parens || e.lhs->kind == Expr::binop) {
                out.push_back("(");
                render_expr(*e.lhs, out);
                out.push_back(")");
            } else {
                render_expr(*e.lhs, out);
            }
            return;
        case Expr::binop: {
            auto child = [&](const Expr& c) {
                if (c.kind == Expr::binop) {
                    out.push_back("(");
                    render_expr(c, out);
                    out.push_back(")");
                } else {
                    render_expr(c, out);
                }
            };
            child(*e.lhs);
            out.push_back(std::string(1, e.op));
            child(*e.rhs);
            return;
        }
    }
}

// wrapped lengths a binop child can take: {1, 2} or >= 4
bool wrapped_feasible(int w) { return w == 1 || w == 2 || w >= 4; }

std::unique_ptr<Expr> gen_expr(int len, Rng& rng);

std::unique_ptr<Expr> make_digit(Rng& rng) {
    auto e = std::make_unique<Expr>();
    e->kind = Expr::digit;
    e->value = rng.uniform_int(0, kModulus - 1);
    return e;
}

char random_op(Rng& rng) {
    static const char ops[3] = {'+', '-', '*'};
    return ops[rng.uniform_int(0, 2)];
}

// node whose rendered length as a binop child is exactly w
std::unique_ptr<Expr> gen_wrapped(int w, Rng& rng) {
    if (w == 1) return make_digit(rng);
    if (w == 2) {
        auto e = std::make_unique<Expr>();
        e->kind = Expr::negate;
        e->lhs = make_digit(rng);
        return e;
    }
    // w >= 4: either a parenthesized binop of bare length w-2 (needs w >= 5)
    // or a negation -(inner) with bare length w
    bool can_binop = w >= 5;
    if (can_binop && rng.uniform() < 0.6) {
        auto e = gen_expr(w - 2, rng);
        if (e->kind == Expr::binop) return e;
        // gen_expr may legitimately return a non-binop of that bare length;
        // re-wrap it so the total length stays w
        auto neg = std::make_unique<Expr>();
        neg->kind = Expr::negate;
        neg->neg_parens = true;
        neg->lhs = gen_expr(w - 3, rng);
        return neg;
    }
    auto neg = std::make_unique<Expr>();
    neg->kind = Expr::negate;
    neg->neg_parens = true;
    neg->lhs = gen_expr(w - 3, rng);
    return neg;
}

std::unique_ptr<Expr> gen_binop(int len, Rng& rng) {
    // split len-1 = a + b with both wrapped-feasible
    std::vector<int> choices;
    for (int a = 1; a <= len - 2; ++a)
        if (wrapped_feasible(a) && wrapped_feasible(len - 1 - a)) choices.push_back(a);
    if (choices.empty()) return nullptr;
    int a = choices[rng.uniform_int(0, static_cast<int>(choices.size()) - 1)];
    auto e = std::make_unique<Expr>();
    e->kind = Expr::binop;
    e->op = random_op(rng);
    e->lhs = gen_wrapped(a, rng);
    e->rhs = gen_wrapped(len - 1 - a, rng);
    return e;
}

std::unique_ptr<Expr> gen_expr(int len, Rng& rng) {
    if (len <= 1) return make_digit(rng);
    if (len == 2) {
        auto e = std::make_unique<Expr>();
        e->kind = Expr::negate;
        e->lhs = make_digit(rng);
        return e;
    }
    if (len >= 4 && rng.uniform() < 0.25) {
        auto e = std::make_unique<Expr>();
        e->kind = Expr::negate;
        e->neg_parens = true;
        e->lhs = gen_expr(len - 3, rng);
        return e;
    }
    if (auto bin = gen_binop(len, rng)) return bin;
    auto e = std::make_unique<Expr>();
    e->kind = Expr::negate;
    e->neg_parens = true;
    e->lhs = gen_expr(len - 3, rng);
    return e;
}

void collect_digit_leaves(Expr& e, std::vector<Expr*>& out) {
    switch (e.kind) {
        case Expr::digit: out.push_back(&e); return;
        case Expr::variable: return;
        case Expr::negate: collect_digit_leaves(*e.lhs, out); return;
        case Expr::binop:
            collect_digit_leaves(*e.lhs, out);
            collect_digit_leaves(*e.rhs, out);
            return;
    }
}

// Recursive-descent evaluator over rendered tokens; the independent route
// used by the checkers (the generator evaluates its tree directly).
struct ExprParser {
    const std::vector<std::string>& toks;
    std::size_t pos = 0;
    int x_value = 0;

    explicit ExprParser(const std::vector<std::string>& t, int x = 0) : toks(t), x_value(x) {}

    bool done() const { return pos >= toks.size(); }
    const std::string& peek() const {
        if (done()) throw std::runtime_error("parse error: unexpected end of expression");
        return toks[pos];
    }

    int parse_expression() {
        long acc = parse_term();
        while (!done() && (peek() == "+" || peek() == "-")) {
            bool plus = toks[pos++] == "+";
            long rhs = parse_term();
            acc = plus ? acc + rhs : acc - rhs;
        }
        return norm5(acc);
    }
    int parse_term() {
        long acc = parse_factor();
        while (!done() && peek() == "*") {
            ++pos;
            acc = static_cast<long>(norm5(acc)) * parse_factor();
        }
        return norm5(acc);
    }
    int parse_factor() {
        const std::string& t = peek();
        if (t == "-") {
            ++pos;
            return norm5(-static_cast<long>(parse_factor()));
        }
        if (t == "(") {
            ++pos;
            int v = parse_expression();
            if (done() || toks[pos] != ")") throw std::runtime_error("parse error: missing ')'");
            ++pos;
            return v;
        }
        if (t == "x") {
            ++pos;
            return x_value;
        }
        if (t.size() == 1 && t[0] >= '0' && t[0] <= '4') {
            ++pos;
            return t[0] - '0';
        }
        throw std::runtime_error("parse error: unexpected token '" + t + "'");
    }
};

int evaluate_tokens(const std::vector<std::string>& toks, int x_value = 0) {
    ExprParser p(toks, x_value);
    int v = p.parse_expression();
    if (!p.done()) throw std::runtime_error("parse error: trailing tokens");
    return v;
}

// ---------------------------------------------------------------------------
// binary string arithmetic (MSB first, no leading zeros except "0")
// ---------------------------------------------------------------------------

std::string strip_zeros(std::string s) {
    std::size_t i = 0;
    while (i + 1 < s.size() && s[i] == '0') ++i;
    return s.substr(i);
}

int cmp_binary(const std::string& a, const std::string& b) {
    std::string x = strip_zeros(a), y = strip_zeros(b);
    if (x.size() != y.size()) return x.size() < y.size() ? -1 : 1;
    if (x == y) return 0;
    return x < y ? -1 : 1;
}

std::string add_binary(const std::string& a, const std::string& b) {
    std::string out;
    int i = static_cast<int>(a.size()) - 1, j = static_cast<int>(b.size()) - 1, carry = 0;
    while (i >= 0 || j >= 0 || carry) {
        int s = carry + (i >= 0 ? a[i--] - '0' : 0) + (j >= 0 ? b[j--] - '0' : 0);
        out.push_back(char('0' + (s & 1)));
        carry = s >> 1;
    }
    std::reverse(out.begin(), out.end());
    return strip_zeros(out);
}

// a - b for a >= b
std::string sub_binary(const std::string& a, const std::string& b) {
    std::string out;
    int i = static_cast<int>(a.size()) - 1, j = static_cast<int>(b.size()) - 1, borrow = 0;
    while (i >= 0) {
        int d = (a[i--] - '0') - borrow - (j >= 0 ? b[j--] - '0' : 0);
        borrow = d < 0;
        out.push_back(char('0' + (d + 2) % 2));
    }
    std::reverse(out.begin(), out.end());
    return strip_zeros(out);
}

std::string mul_binary(const std::string& a, const std::string& b) {
    std::string acc = "0";
    for (char bit : strip_zeros(a)) {
        acc.push_back('0');  // shift left
        if (bit == '1') acc = add_binary(acc, b);
    }
    return strip_zeros(acc);
}

// floor square root, digit-by-digit in base 2
std::string isqrt_binary(const std::string& value) {
    std::string x = strip_zeros(value);
    if (x.size() % 2 == 1) x.insert(x.begin(), '0');
    std::string root;  // bits of the result
    std::string rem = "0";
    for (std::size_t i = 0; i < x.size(); i += 2) {
        rem.push_back(x[i]);
        rem.push_back(x[i + 1]);
        rem = strip_zeros(rem);
        std::string trial = root + "01";  // (root << 2) | 1
        trial = strip_zeros(trial);
        if (cmp_binary(trial, rem) <= 0) {
            rem = sub_binary(rem, trial);
            root.push_back('1');
        } else {
            root.push_back('0');
        }
    }
    return strip_zeros(root.empty() ? "0" : root);
}

std::string random_binary(int len, Rng& rng) {
    std::string s;
    for (int i = 0; i < len; ++i) {
        if (i == 0 && len > 1)
            s.push_back('1');
        else
            s.push_back(char('0' + rng.uniform_int(0, 1)));
    }
    return s;
}

// ---------------------------------------------------------------------------
// instance assembly
// ---------------------------------------------------------------------------

TaskInstance assemble(TaskId id, const TaskVocab& vocab, const std::vector<std::string>& input,
                      const std::vector<std::string>& target) {
    TaskInstance inst;
    inst.task = id;
    inst.length = static_cast<int>(input.size());
    for (const auto& t : input) inst.input_tokens.push_back(vocab.id_of(t));
    for (const auto& t : target) inst.target_tokens.push_back(vocab.id_of(t));
    inst.loss_mask.assign(input.size() + target.size(), 0);
    for (std::size_t i = input.size(); i < inst.loss_mask.size(); ++i) inst.loss_mask[i] = 1;
    return inst;
}

std::vector<std::string> split_chars(const std::string& s) {
    std::vector<std::string> out;
    for (char c : s) out.emplace_back(1, c);
    return out;
}

std::vector<std::string> random_ab(int len, Rng& rng) {
    std::vector<std::string> out;
    for (int i = 0; i < len; ++i) out.emplace_back(rng.uniform_int(0, 1) ? "b" : "a");
    return out;
}

void simulate_stack(const std::vector<std::string>& tokens, std::size_t stack_len,
                    std::string& out) {
    // string-as-stack simulation; the checker re-runs it on a deque
    out.clear();
    for (std::size_t i = 0; i < stack_len; ++i) out += tokens[i];
    for (std::size_t i = stack_len; i < tokens.size(); ++i) {
        if (tokens[i] == "POP") {
            if (!out.empty()) out.pop_back();
        } else if (tokens[i] == "PUSH_a") {
            out.push_back('a');
        } else {
            out.push_back('b');
        }
    }
}

}  // namespace

TaskInstance generate(const TaskSpec& spec, int length, Rng& rng) {
    const TaskId id = spec.id;
    const TaskVocab vocab = task_vocab(id);
    const int len = feasible_length(id, length);

    switch (id) {
        case TaskId::even_pairs: {
            auto x = random_ab(len, rng);
            bool even = x.front() == x.back();
            return assemble(id, vocab, x, {even ? "True" : "False"});
        }
        case TaskId::parity_check: {
            auto x = random_ab(len, rng);
            int b_count = 0;
            for (const auto& t : x) b_count += t == "b";
            return assemble(id, vocab, x, {b_count % 2 == 0 ? "True" : "False"});
        }
        case TaskId::modular_arithmetic_simple: {
            std::vector<std::string> x;
            long acc = rng.uniform_int(0, 4);
            x.push_back(std::string(1, char('0' + acc)));
            for (int i = 1; i < len; i += 2) {
                bool plus = rng.uniform_int(0, 1) == 1;
                int d = rng.uniform_int(0, 4);
                x.push_back(plus ? "+" : "-");
                x.push_back(std::string(1, char('0' + d)));
                acc = plus ? acc + d : acc - d;
            }
            return assemble(id, vocab, x, {std::string(1, char('0' + norm5(acc)))});
        }
        case TaskId::cycle_navigation: {
            std::vector<std::string> x;
            long pos = 0;
            for (int i = 0; i < len; ++i) {
                int mv = rng.uniform_int(0, 2);
                x.push_back(std::string(1, char('0' + mv)));
                pos += mv == 1 ? 1 : (mv == 2 ? -1 : 0);
            }
            return assemble(id, vocab, x, {std::string(1, char('0' + norm5(pos)))});
        }
        case TaskId::stack_manipulation: {
            for (int attempt = 0; attempt < 64; ++attempt) {
                int stack_len = rng.uniform_int(1, len);
                std::vector<std::string> x = random_ab(stack_len, rng);
                for (int i = stack_len; i < len; ++i) {
                    int a = rng.uniform_int(0, 2);
                    x.push_back(a == 0 ? "POP" : (a == 1 ? "PUSH_a" : "PUSH_b"));
                }
                std::string final_stack;
                simulate_stack(x, static_cast<std::size_t>(stack_len), final_stack);
                if (final_stack.empty()) continue;  // answers must be non-empty
                return assemble(id, vocab, x, split_chars(final_stack));
            }
            // all-push fallback always leaves a non-empty stack
            std::vector<std::string> x = random_ab(1, rng);
            for (int i = 1; i < len; ++i) x.push_back(rng.uniform_int(0, 1) ? "PUSH_b" : "PUSH_a");
            std::string final_stack;
            simulate_stack(x, 1, final_stack);
            return assemble(id, vocab, x, split_chars(final_stack));
        }
        case TaskId::reverse_string: {
            auto x = random_ab(len, rng);
            auto y = x;
            std::reverse(y.begin(), y.end());
            return assemble(id, vocab, x, y);
        }
        case TaskId::modular_arithmetic: {
            auto tree = gen_expr(len, rng);
            std::vector<std::string> x;
            render_expr(*tree, x);
            int v = eval_expr(*tree, 0);
            return assemble(id, vocab, x, {std::string(1, char('0' + v))});
        }
        case TaskId::solve_equation: {
            int expr_len = len - 2;
            for (int attempt = 0; attempt < 256; ++attempt) {
                auto tree = gen_expr(expr_len, rng);
                std::vector<Expr*> leaves;
                collect_digit_leaves(*tree, leaves);
                if (leaves.empty()) continue;
                Expr* leaf = leaves[rng.uniform_int(0, static_cast<int>(leaves.size()) - 1)];
                leaf->kind = Expr::variable;
                int x_star = rng.uniform_int(0, 4);
                int target = eval_expr(*tree, x_star);
                int solutions = 0;
                for (int cand = 0; cand < kModulus; ++cand)
                    solutions += eval_expr(*tree, cand) == target;
                if (solutions != 1) continue;
                std::vector<std::string> x;
                render_expr(*tree, x);
                x.push_back("=");
                x.push_back(std::string(1, char('0' + target)));
                return assemble(id, vocab, x, {std::string(1, char('0' + x_star))});
            }
            // x alone is always uniquely solvable
            std::vector<std::string> x{"x", "="};
            int x_star = rng.uniform_int(0, 4);
            x.push_back(std::string(1, char('0' + x_star)));
            return assemble(id, vocab, x, {std::string(1, char('0' + x_star))});
        }
        case TaskId::duplicate_string: {
            auto x = random_ab(len, rng);
            auto y = x;
            y.insert(y.end(), x.begin(), x.end());
            return assemble(id, vocab, x, y);
        }
        case TaskId::missing_duplicate: {
            int half = len / 2;
            std::vector<std::string> w;
            for (int i = 0; i < half; ++i) w.emplace_back(rng.uniform_int(0, 1) ? "1" : "0");
            std::vector<std::string> full = w;
            full.insert(full.end(), w.begin(), w.end());
            int hole = rng.uniform_int(0, len - 1);
            std::string answer = full[hole];
            full[hole] = "2";
            return assemble(id, vocab, full, {answer});
        }
        case TaskId::odds_first: {
            auto x = random_ab(len, rng);
            std::vector<std::string> y;
            for (std::size_t i = 0; i < x.size(); i += 2) y.push_back(x[i]);
            for (std::size_t i = 1; i < x.size(); i += 2) y.push_back(x[i]);
            return assemble(id, vocab, x, y);
        }
        case TaskId::binary_addition: {
            int la = rng.uniform_int(1, len - 2);
            int lb = len - 1 - la;
            std::string a = random_binary(la, rng), b = random_binary(lb, rng);
            std::string sum = add_binary(a, b);
            std::vector<std::string> x = split_chars(a);
            x.push_back("+");
            for (char c : b) x.emplace_back(1, c);
            return assemble(id, vocab, x, split_chars(sum));
        }
        case TaskId::compute_sqrt: {
            std::string a = random_binary(len, rng);
            return assemble(id, vocab, split_chars(a), split_chars(isqrt_binary(a)));
        }
        case TaskId::bucket_sort: {
            std::vector<std::string> x;
            std::vector<int> counts(kModulus, 0);
            for (int i = 0; i < len; ++i) {
                int d = rng.uniform_int(0, 4);
                counts[d] += 1;
                x.push_back(std::string(1, char('0' + d)));
            }
            std::vector<std::string> y;
            for (int d = 0; d < kModulus; ++d)
                for (int c = 0; c < counts[d]; ++c) y.push_back(std::string(1, char('0' + d)));
            return assemble(id, vocab, x, y);
        }
    }
    throw std::runtime_error("contract error: bad task id");
}

namespace {

std::vector<std::string> decode(const TaskVocab& vocab, const std::vector<int>& ids) {
    std::vector<std::string> out;
    for (int id : ids) out.push_back(vocab.tokens.at(static_cast<std::size_t>(id)));
    return out;
}

std::string joined(const std::vector<std::string>& toks) {
    std::string s;
    for (const auto& t : toks) {
        if (t.size() != 1) return {};
        s += t;
    }
    return s;
}

}  // namespace

bool check_instance(const TaskInstance& inst) {
    const TaskVocab vocab = task_vocab(inst.task);
    const auto input = decode(vocab, inst.input_tokens);
    const auto target = decode(vocab, inst.target_tokens);

    // mask shape contract shared by every task
    if (inst.loss_mask.size() != input.size() + target.size()) return false;
    for (std::size_t i = 0; i < inst.loss_mask.size(); ++i)
        if ((inst.loss_mask[i] != 0) != (i >= input.size())) return false;

    switch (inst.task) {
        case TaskId::even_pairs: {
            // count unequal adjacent pairs; even count iff first == last
            int unequal = 0;
            for (std::size_t i = 0; i + 1 < input.size(); ++i) unequal += input[i] != input[i + 1];
            return target.size() == 1 && target[0] == (unequal % 2 == 0 ? "True" : "False");
        }
        case TaskId::parity_check: {
            bool odd = false;
            for (const auto& t : input) odd ^= t == "b";
            return target.size() == 1 && target[0] == (odd ? "False" : "True");
        }
        case TaskId::modular_arithmetic_simple: {
            if (target.size() != 1) return false;
            return evaluate_tokens(input) == target[0][0] - '0';
        }
        case TaskId::cycle_navigation: {
            int pos = 0;
            for (const auto& t : input) {
                if (t == "1") pos = (pos + 1) % kModulus;
                if (t == "2") pos = (pos + kModulus - 1) % kModulus;
            }
            return target.size() == 1 && target[0][0] - '0' == pos;
        }
        case TaskId::stack_manipulation: {
            std::vector<char> stack;
            std::size_t i = 0;
            while (i < input.size() && (input[i] == "a" || input[i] == "b"))
                stack.push_back(input[i++][0]);
            for (; i < input.size(); ++i) {
                if (input[i] == "POP") {
                    if (!stack.empty()) stack.pop_back();
                } else if (input[i] == "PUSH_a") {
                    stack.push_back('a');
                } else if (input[i] == "PUSH_b") {
                    stack.push_back('b');
                } else {
                    return false;
                }
            }
            std::string expected(stack.begin(), stack.end());
            return !expected.empty() && joined(target) == expected;
        }
        case TaskId::reverse_string: {
            auto again = target;
            std::reverse(again.begin(), again.end());
            return again == input;
        }
        case TaskId::modular_arithmetic: {
            if (target.size() != 1) return false;
            return evaluate_tokens(input) == target[0][0] - '0';
        }
        case TaskId::solve_equation: {
            if (target.size() != 1 || input.size() < 3) return false;
            if (input[input.size() - 2] != "=") return false;
            int rhs = input.back()[0] - '0';
            std::vector<std::string> expr(input.begin(), input.end() - 2);
            int solutions = 0, found = -1;
            for (int cand = 0; cand < kModulus; ++cand) {
                if (evaluate_tokens(expr, cand) == rhs) {
                    ++solutions;
                    found = cand;
                }
            }
            return solutions == 1 && found == target[0][0] - '0';
        }
        case TaskId::duplicate_string: {
            if (target.size() != 2 * input.size()) return false;
            for (std::size_t i = 0; i < input.size(); ++i)
                if (target[i] != input[i] || target[input.size() + i] != input[i]) return false;
            return true;
        }
        case TaskId::missing_duplicate: {
            if (target.size() != 1 || input.size() % 2 != 0) return false;
            int hole = -1;
            for (std::size_t i = 0; i < input.size(); ++i) {
                if (input[i] == "2") {
                    if (hole >= 0) return false;  // exactly one hole
                    hole = static_cast<int>(i);
                }
            }
            if (hole < 0) return false;
            int twin = (hole + static_cast<int>(input.size()) / 2) % static_cast<int>(input.size());
            return input[static_cast<std::size_t>(twin)] == target[0];
        }
        case TaskId::odds_first: {
            if (target.size() != input.size()) return false;
            std::vector<std::string> rebuilt(input.size());
            std::size_t odd_count = (input.size() + 1) / 2;
            for (std::size_t i = 0; i < odd_count; ++i) rebuilt[2 * i] = target[i];
            for (std::size_t i = 0; i + odd_count < input.size(); ++i)
                rebuilt[2 * i + 1] = target[odd_count + i];
            return rebuilt == input;
        }
        case TaskId::binary_addition: {
            std::string a, b, sum = joined(target);
            bool after_plus = false;
            for (const auto& t : input) {
                if (t == "+") {
                    if (after_plus) return false;
                    after_plus = true;
                } else {
                    (after_plus ? b : a) += t;
                }
            }
            if (a.empty() || b.empty() || sum.empty()) return false;
            // verify through subtraction rather than re-adding the same way
            if (cmp_binary(sum, a) < 0) return false;
            return cmp_binary(sub_binary(sum, a), b) == 0;
        }
        case TaskId::compute_sqrt: {
            std::string x = joined(input), y = joined(target);
            if (x.empty() || y.empty()) return false;
            // y^2 <= x < (y+1)^2
            if (cmp_binary(mul_binary(y, y), x) > 0) return false;
            std::string y1 = add_binary(y, "1");
            return cmp_binary(x, mul_binary(y1, y1)) < 0;
        }
        case TaskId::bucket_sort: {
            if (target.size() != input.size()) return false;
            auto sorted = input;
            std::sort(sorted.begin(), sorted.end());
            return sorted == target;
        }
    }
    return false;
}

// ---------------------------------------------------------------------------
// text ingestion
// ---------------------------------------------------------------------------

std::vector<int> load_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("io error: cannot open text file '" + path + "'");
    std::vector<int> bytes;
    char c;
    while (in.get(c)) bytes.push_back(static_cast<unsigned char>(c));
    if (bytes.empty()) throw std::runtime_error("io error: text file '" + path + "' is empty");
    return bytes;
}

TextWindows windows_from_bytes(const std::vector<int>& bytes, int eval_len, int k) {
    if (eval_len < 1 || k < 1 || k > eval_len)
        throw std::runtime_error("config error: need 1 <= k <= eval_len");
    if (static_cast<int>(bytes.size()) < eval_len)
        throw std::runtime_error("too short error: file holds " + std::to_string(bytes.size()) +
                                 " bytes, window needs " + std::to_string(eval_len));
    TextWindows tw;
    tw.eval_len = eval_len;
    tw.k = k;
    std::size_t count = bytes.size() / static_cast<std::size_t>(eval_len);
    for (std::size_t w = 0; w < count; ++w) {
        tw.windows.emplace_back(bytes.begin() + static_cast<long>(w) * eval_len,
                                bytes.begin() + static_cast<long>(w + 1) * eval_len);
    }
    return tw;
}

TextWindows ingest_text(const std::string& path, int eval_len, int k) {
    return windows_from_bytes(load_bytes(path), eval_len, k);
}

std::vector<std::uint8_t> TextWindows::window_loss_mask() const {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(eval_len), 0);
    for (int i = eval_len - k; i < eval_len; ++i) mask[static_cast<std::size_t>(i)] = 1;
    return mask;
}

// ---------------------------------------------------------------------------
// encoder batching
// ---------------------------------------------------------------------------

EncoderBatch make_encoder_batch(const std::vector<TaskInstance>& instances, const TaskVocab& vocab) {
    if (instances.empty()) throw std::runtime_error("contract error: empty batch");
    EncoderBatch batch;
    batch.batch = static_cast<int>(instances.size());
    for (const auto& inst : instances) {
        if (inst.target_tokens.empty())
            throw std::runtime_error("contract error: answer_length must be positive");
        int total = static_cast<int>(inst.input_tokens.size() + inst.target_tokens.size());
        batch.valid_lengths.push_back(total);
        batch.seq_len = std::max(batch.seq_len, total);
    }
    batch.tokens.assign(std::size_t(batch.batch) * batch.seq_len, vocab.pad_id);
    batch.targets.assign(std::size_t(batch.batch) * batch.seq_len, 0);
    batch.loss_mask.assign(std::size_t(batch.batch) * batch.seq_len, 0);
    for (int b = 0; b < batch.batch; ++b) {
        const TaskInstance& inst = instances[static_cast<std::size_t>(b)];
        std::size_t base = std::size_t(b) * batch.seq_len;
        std::size_t in_len = inst.input_tokens.size();
        for (std::size_t i = 0; i < in_len; ++i) batch.tokens[base + i] = inst.input_tokens[i];
        for (std::size_t i = 0; i < inst.target_tokens.size(); ++i) {
            batch.tokens[base + in_len + i] = vocab.placeholder_id;
            batch.targets[base + in_len + i] = inst.target_tokens[i];
            batch.loss_mask[base + in_len + i] = 1;
        }
    }
    return batch;
}

}  // namespace dape
