#include <cctype>
#include <charconv>

#include "flowkit/query.hpp"

namespace flowkit::query {

FilterExpr FilterExpr::leaf(Predicate p) {
  FilterExpr e;
  e.predicate = std::move(p);
  return e;
}

FilterExpr FilterExpr::negate(FilterExpr inner) {
  FilterExpr e;
  e.kind = Kind::Not;
  e.children.push_back(std::move(inner));
  return e;
}

FilterExpr FilterExpr::all_of(std::vector<FilterExpr> children) {
  if (children.size() == 1) return std::move(children.front());
  FilterExpr e;
  e.kind = Kind::And;
  e.children = std::move(children);
  return e;
}

FilterExpr FilterExpr::any_of(std::vector<FilterExpr> children) {
  if (children.size() == 1) return std::move(children.front());
  FilterExpr e;
  e.kind = Kind::Or;
  e.children = std::move(children);
  return e;
}

bool operator==(const FilterExpr& a, const FilterExpr& b) {
  if (a.kind != b.kind) return false;
  if (a.kind == FilterExpr::Kind::Leaf) return a.predicate == b.predicate;
  return a.children == b.children;
}

ParseError::ParseError(ParseErrorKind kind, std::size_t offset, const std::string& what)
    : Error(what + " at offset " + std::to_string(offset)), kind_(kind), offset_(offset) {}

namespace {

struct Token {
  enum class Type { Word, LParen, RParen, Op, End } type;
  std::string_view text;
  std::size_t offset;
};

bool is_op_char(char c) { return c == '<' || c == '>' || c == '=' || c == '!' || c == '&' || c == '|'; }

std::vector<Token> tokenize(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (c == '(') {
      out.push_back({Token::Type::LParen, s.substr(i, 1), i});
      ++i;
    } else if (c == ')') {
      out.push_back({Token::Type::RParen, s.substr(i, 1), i});
      ++i;
    } else if (is_op_char(c)) {
      std::size_t j = i + 1;
      while (j < s.size() && is_op_char(s[j])) ++j;
      out.push_back({Token::Type::Op, s.substr(i, j - i), i});
      i = j;
    } else {
      std::size_t j = i + 1;
      while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j])) && s[j] != '(' &&
             s[j] != ')' && !is_op_char(s[j])) {
        ++j;
      }
      out.push_back({Token::Type::Word, s.substr(i, j - i), i});
      i = j;
    }
  }
  out.push_back({Token::Type::End, {}, s.size()});
  return out;
}

class Parser {
 public:
  explicit Parser(std::string_view text) : tokens_(tokenize(text)) {}

  FilterExpr parse() {
    if (peek().type == Token::Type::End) return FilterExpr::leaf(MatchAll{});
    FilterExpr e = parse_or();
    if (peek().type != Token::Type::End) syntax("unexpected '" + std::string(peek().text) + "'");
    return e;
  }

 private:
  const Token& peek() const { return tokens_[pos_]; }
  const Token& advance() {
    const Token& t = tokens_[pos_];
    if (pos_ + 1 < tokens_.size()) ++pos_;
    return t;
  }

  [[noreturn]] void syntax(const std::string& what) const {
    throw ParseError(ParseErrorKind::SyntaxError, peek().offset, what);
  }

  bool accept_word(std::string_view w) {
    if (peek().type == Token::Type::Word && peek().text == w) {
      advance();
      return true;
    }
    return false;
  }
  bool accept_op(std::string_view op) {
    if (peek().type == Token::Type::Op && peek().text == op) {
      advance();
      return true;
    }
    return false;
  }

  FilterExpr parse_or() {
    std::vector<FilterExpr> terms;
    terms.push_back(parse_and());
    while (accept_word("or") || accept_op("||")) terms.push_back(parse_and());
    return FilterExpr::any_of(std::move(terms));
  }

  FilterExpr parse_and() {
    std::vector<FilterExpr> terms;
    terms.push_back(parse_unary());
    while (accept_word("and") || accept_op("&&")) terms.push_back(parse_unary());
    return FilterExpr::all_of(std::move(terms));
  }

  FilterExpr parse_unary() {
    if (accept_word("not") || accept_op("!")) return FilterExpr::negate(parse_unary());
    if (peek().type == Token::Type::LParen) {
      advance();
      FilterExpr inner = parse_or();
      if (peek().type != Token::Type::RParen) syntax("expected ')'");
      advance();
      return inner;
    }
    return FilterExpr::leaf(parse_predicate());
  }

  std::string_view expect_word(const char* what) {
    if (peek().type != Token::Type::Word) syntax(std::string("expected ") + what);
    return advance().text;
  }

  std::uint64_t parse_number(std::string_view text, std::size_t offset) const {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
      throw ParseError(ParseErrorKind::SyntaxError, offset, "invalid number '" + std::string(text) + "'");
    }
    return v;
  }

  Predicate parse_predicate() {
    const Token& t = peek();
    if (t.type != Token::Type::Word) syntax("expected a predicate");

    if (accept_word("any")) return MatchAll{};

    if (accept_word("proto")) {
      const std::size_t offset = peek().offset;
      const auto name = expect_word("protocol");
      if (name == "tcp") return ProtoPredicate{6};
      if (name == "udp") return ProtoPredicate{17};
      if (name == "icmp") return ProtoPredicate{1};
      if (name == "icmp6") return ProtoPredicate{58};
      const auto v = parse_number(name, offset);
      if (v > 255) throw ParseError(ParseErrorKind::SyntaxError, offset, "protocol number above 255");
      return ProtoPredicate{static_cast<std::uint8_t>(v)};
    }

    for (auto [word, counter] : {std::pair{"bytes", Counter::Bytes}, std::pair{"packets", Counter::Packets},
                                 std::pair{"duration", Counter::Duration}}) {
      if (!accept_word(word)) continue;
      if (peek().type != Token::Type::Op) syntax("expected comparison operator");
      const auto op_text = advance().text;
      CompareOp op;
      if (op_text == "<") op = CompareOp::Lt;
      else if (op_text == "<=") op = CompareOp::Le;
      else if (op_text == ">") op = CompareOp::Gt;
      else if (op_text == ">=") op = CompareOp::Ge;
      else if (op_text == "=" || op_text == "==") op = CompareOp::Eq;
      else throw ParseError(ParseErrorKind::SyntaxError, tokens_[pos_ - 1].offset,
                            "unknown operator '" + std::string(op_text) + "'");
      const std::size_t offset = peek().offset;
      return CounterPredicate{counter, op, parse_number(expect_word("number"), offset)};
    }

    Direction dir = Direction::Either;
    if (accept_word("src")) {
      dir = Direction::Src;
    } else if (accept_word("dst")) {
      dir = Direction::Dst;
    }

    if (accept_word("host")) {
      const std::size_t offset = peek().offset;
      const auto text = expect_word("address");
      auto addr = IpAddress::parse(text);
      if (!addr) throw ParseError(ParseErrorKind::SyntaxError, offset, "invalid address '" + std::string(text) + "'");
      return HostPredicate{dir, *addr};
    }
    if (accept_word("net")) {
      const std::size_t offset = peek().offset;
      const auto text = expect_word("network");
      try {
        return NetPredicate{dir, Prefix::parse(text)};
      } catch (const InvalidCidr& e) {
        throw ParseError(ParseErrorKind::InvalidCidr, offset, e.what());
      }
    }
    if (accept_word("port")) {
      const std::size_t offset = peek().offset;
      const auto v = parse_number(expect_word("port number"), offset);
      if (v > 65535) throw ParseError(ParseErrorKind::InvalidPortRange, offset, "port above 65535");
      return PortPredicate{dir, static_cast<std::uint16_t>(v)};
    }
    syntax(dir == Direction::Either ? "unknown predicate '" + std::string(t.text) + "'"
                                    : "expected host, net or port");
  }

  std::vector<Token> tokens_;
  std::size_t pos_ = 0;
};

std::string direction_prefix(Direction d) {
  switch (d) {
    case Direction::Src: return "src ";
    case Direction::Dst: return "dst ";
    case Direction::Either: break;
  }
  return "";
}

std::string print_predicate(const Predicate& p) {
  struct Visitor {
    std::string operator()(const MatchAll&) const { return "any"; }
    std::string operator()(const ProtoPredicate& x) const {
      switch (x.protocol) {
        case 1: return "proto icmp";
        case 6: return "proto tcp";
        case 17: return "proto udp";
        case 58: return "proto icmp6";
        default: return "proto " + std::to_string(x.protocol);
      }
    }
    std::string operator()(const HostPredicate& x) const {
      return direction_prefix(x.direction) + "host " + x.address.to_string();
    }
    std::string operator()(const NetPredicate& x) const {
      return direction_prefix(x.direction) + "net " + x.prefix.to_string();
    }
    std::string operator()(const PortPredicate& x) const {
      return direction_prefix(x.direction) + "port " + std::to_string(x.port);
    }
    std::string operator()(const CounterPredicate& x) const {
      static constexpr const char* names[] = {"bytes", "packets", "duration"};
      static constexpr const char* ops[] = {"<", "<=", ">", ">=", "="};
      return std::string(names[static_cast<int>(x.counter)]) + " " + ops[static_cast<int>(x.op)] + " " +
             std::to_string(x.value);
    }
  };
  return std::visit(Visitor{}, p);
}

bool compare(std::uint64_t lhs, CompareOp op, std::uint64_t rhs) {
  switch (op) {
    case CompareOp::Lt: return lhs < rhs;
    case CompareOp::Le: return lhs <= rhs;
    case CompareOp::Gt: return lhs > rhs;
    case CompareOp::Ge: return lhs >= rhs;
    case CompareOp::Eq: return lhs == rhs;
  }
  return false;
}

template <typename Match>
bool directional(Direction d, const FlowRecord& f, Match&& match) {
  switch (d) {
    case Direction::Src: return match(f.key.src_ip, f.key.src_port);
    case Direction::Dst: return match(f.key.dst_ip, f.key.dst_port);
    case Direction::Either:
      return match(f.key.src_ip, f.key.src_port) || match(f.key.dst_ip, f.key.dst_port);
  }
  return false;
}

bool evaluate_predicate(const Predicate& p, const FlowRecord& f) {
  struct Visitor {
    const FlowRecord& f;
    bool operator()(const MatchAll&) const { return true; }
    bool operator()(const ProtoPredicate& x) const { return f.key.protocol == x.protocol; }
    bool operator()(const HostPredicate& x) const {
      return directional(x.direction, f, [&](const IpAddress& a, std::uint16_t) { return a == x.address; });
    }
    bool operator()(const NetPredicate& x) const {
      return directional(x.direction, f, [&](const IpAddress& a, std::uint16_t) { return x.prefix.contains(a); });
    }
    bool operator()(const PortPredicate& x) const {
      return directional(x.direction, f, [&](const IpAddress&, std::uint16_t port) { return port == x.port; });
    }
    bool operator()(const CounterPredicate& x) const {
      std::uint64_t value = 0;
      switch (x.counter) {
        case Counter::Bytes: value = f.bytes; break;
        case Counter::Packets: value = f.packets; break;
        case Counter::Duration:
          value = f.last_seen_ms >= f.first_seen_ms
                      ? static_cast<std::uint64_t>(f.last_seen_ms - f.first_seen_ms)
                      : 0;
          break;
      }
      return compare(value, x.op, x.value);
    }
  };
  return std::visit(Visitor{f}, p);
}

}  // namespace

FilterExpr parse_filter(std::string_view text) { return Parser(text).parse(); }

std::string print(const FilterExpr& e) {
  using Kind = FilterExpr::Kind;
  auto child_text = [](const FilterExpr& c) {
    const bool compound = c.kind == Kind::And || c.kind == Kind::Or;
    return compound ? "(" + print(c) + ")" : print(c);
  };
  switch (e.kind) {
    case Kind::Leaf: return print_predicate(e.predicate);
    case Kind::Not: return "not " + child_text(e.children.front());
    case Kind::And:
    case Kind::Or: {
      const char* sep = e.kind == Kind::And ? " and " : " or ";
      std::string out;
      for (std::size_t i = 0; i < e.children.size(); ++i) {
        if (i) out += sep;
        out += child_text(e.children[i]);
      }
      return out;
    }
  }
  return {};
}

bool evaluate(const FilterExpr& e, const FlowRecord& flow) {
  using Kind = FilterExpr::Kind;
  switch (e.kind) {
    case Kind::Leaf: return evaluate_predicate(e.predicate, flow);
    case Kind::Not: return !evaluate(e.children.front(), flow);
    case Kind::And:
      for (const auto& c : e.children) {
        if (!evaluate(c, flow)) return false;
      }
      return true;
    case Kind::Or:
      for (const auto& c : e.children) {
        if (evaluate(c, flow)) return true;
      }
      return false;
  }
  return false;
}

}  // namespace flowkit::query
