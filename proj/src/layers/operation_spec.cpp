#include "ssp/layers/operation_spec.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <map>

namespace ssp::layers {
namespace {

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t");
    auto e = s.find_last_not_of(" \t");
    if (b == std::string_view::npos) return {};
    return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

std::string shortest(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

// Always shows a fractional part: 1 -> "1.0".
std::string with_decimal(double v) {
    std::string s = shortest(v);
    if (s.find_first_of(".e") == std::string::npos) s += ".0";
    return s;
}

double parse_number(const std::string& text, const std::string& key, std::string_view whole) {
    double v = 0.0;
    auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || end != text.data() + text.size() || !std::isfinite(v)) {
        throw SpecError("operation '" + std::string(whole) + "': bad value '" + text + "' for " + key);
    }
    return v;
}

std::size_t parse_count(const std::string& text, const std::string& key, std::string_view whole) {
    const double v = parse_number(text, key, whole);
    if (v < 0 || v != std::floor(v)) {
        throw SpecError("operation '" + std::string(whole) + "': " + key + " must be a non-negative integer");
    }
    return static_cast<std::size_t>(v);
}

std::map<std::string, std::string> parse_args(std::string_view body, std::string_view whole) {
    std::map<std::string, std::string> args;
    std::size_t start = 0;
    while (start <= body.size()) {
        auto comma = body.find(',', start);
        if (comma == std::string_view::npos) comma = body.size();
        const std::string item = trim(body.substr(start, comma - start));
        if (!item.empty()) {
            const auto eq = item.find('=');
            if (eq == std::string::npos) throw SpecError("operation '" + std::string(whole) + "': expected key=value");
            const std::string key = lower(trim(item.substr(0, eq)));
            if (!args.emplace(key, trim(item.substr(eq + 1))).second) {
                throw SpecError("operation '" + std::string(whole) + "': duplicate argument " + key);
            }
        }
        start = comma + 1;
    }
    return args;
}

void reject_extra(const std::map<std::string, std::string>& args, std::initializer_list<std::string_view> allowed,
                  std::string_view whole) {
    for (const auto& [key, _] : args) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw SpecError("operation '" + std::string(whole) + "': unknown argument " + key);
        }
    }
}

}  // namespace

OperationSpec OperationSpec::identity() { return {}; }

OperationSpec OperationSpec::sep_conv(std::size_t k) {
    if (k != 3 && k != 5) throw SpecError("separable convolution supports k=3 or k=5, got " + std::to_string(k));
    OperationSpec s;
    s.kind = k == 3 ? OpKind::SepConv3 : OpKind::SepConv5;
    s.kernel = k;
    return s;
}

OperationSpec OperationSpec::max_pool3() {
    OperationSpec s;
    s.kind = OpKind::MaxPool3;
    s.kernel = 3;
    return s;
}

OperationSpec OperationSpec::avg_pool3() {
    OperationSpec s;
    s.kind = OpKind::AvgPool3;
    s.kernel = 3;
    return s;
}

OperationSpec OperationSpec::gaussian(double sigma) {
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw SpecError("gaussian noise needs sigma >= 0");
    OperationSpec s;
    s.kind = OpKind::GaussianNoise;
    s.sigma = sigma;
    return s;
}

OperationSpec OperationSpec::dropout(double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw SpecError("dropout probability must lie in [0,1]");
    OperationSpec s;
    s.kind = OpKind::Dropout;
    s.p = p;
    return s;
}

OperationSpec OperationSpec::trans_conv(std::size_t k) {
    if (k != 3 && k != 5) throw SpecError("transposed convolution supports k=3 or k=5, got " + std::to_string(k));
    OperationSpec s;
    s.kind = k == 3 ? OpKind::TransConv3 : OpKind::TransConv5;
    s.kernel = k;
    return s;
}

OperationSpec OperationSpec::stretched_conv(std::size_t k, std::size_t padding, std::size_t dilation) {
    if (k % 2 == 0 || k == 0) throw SpecError("stretched convolution needs an odd kernel size");
    if (dilation == 0) throw SpecError("stretched convolution needs dilation >= 1");
    if (2 * padding != dilation * (k - 1)) {
        throw SpecError("stretched convolution must preserve spatial size: need 2*pad == dil*(k-1)");
    }
    OperationSpec s;
    s.kind = OpKind::StretchedConv;
    s.kernel = k;
    s.padding = padding;
    s.dilation = dilation;
    return s;
}

OperationSpec OperationSpec::parse(std::string_view text) {
    const std::string whole = trim(text);
    const auto open = whole.find('(');
    const std::string name = lower(trim(whole.substr(0, open)));
    std::map<std::string, std::string> args;
    if (open != std::string::npos) {
        if (whole.back() != ')') throw SpecError("operation '" + whole + "': missing ')'");
        args = parse_args(std::string_view(whole).substr(open + 1, whole.size() - open - 2), whole);
    }
    auto no_args = [&] {
        if (!args.empty()) throw SpecError("operation '" + whole + "' takes no arguments");
    };

    if (name == "identity") return no_args(), identity();
    if (name == "sep_conv_3x3") return no_args(), sep_conv(3);
    if (name == "sep_conv_5x5") return no_args(), sep_conv(5);
    if (name == "max_pool_3x3") return no_args(), max_pool3();
    if (name == "avg_pool_3x3") return no_args(), avg_pool3();
    if (name == "trans_conv_3x3") return no_args(), trans_conv(3);
    if (name == "trans_conv_5x5") return no_args(), trans_conv(5);
    if (name == "gaussian") {
        reject_extra(args, {"sigma"}, whole);
        if (!args.count("sigma")) throw SpecError("operation '" + whole + "': missing sigma");
        return gaussian(parse_number(args["sigma"], "sigma", whole));
    }
    if (name == "dropout") {
        reject_extra(args, {"p"}, whole);
        if (!args.count("p")) throw SpecError("operation '" + whole + "': missing p");
        return dropout(parse_number(args["p"], "p", whole));
    }
    if (name == "stretched_conv") {
        reject_extra(args, {"k", "pad", "dil"}, whole);
        const std::size_t k = args.count("k") ? parse_count(args["k"], "k", whole) : 3;
        const std::size_t pad = args.count("pad") ? parse_count(args["pad"], "pad", whole) : 50;
        const std::size_t dil = args.count("dil") ? parse_count(args["dil"], "dil", whole) : 50;
        return stretched_conv(k, pad, dil);
    }
    throw SpecError("unknown operation '" + (name.empty() ? whole : name) + "'");
}

std::string OperationSpec::canonical() const {
    switch (kind) {
        case OpKind::Identity: return "identity";
        case OpKind::SepConv3: return "sep_conv_3x3";
        case OpKind::SepConv5: return "sep_conv_5x5";
        case OpKind::MaxPool3: return "max_pool_3x3";
        case OpKind::AvgPool3: return "avg_pool_3x3";
        case OpKind::GaussianNoise: return "gaussian(sigma=" + shortest(sigma) + ")";
        case OpKind::Dropout: return "dropout(p=" + with_decimal(p) + ")";
        case OpKind::TransConv3: return "trans_conv_3x3";
        case OpKind::TransConv5: return "trans_conv_5x5";
        case OpKind::StretchedConv:
            return "stretched_conv(k=" + std::to_string(kernel) + ",pad=" + std::to_string(padding) +
                   ",dil=" + std::to_string(dilation) + ")";
    }
    return "unknown";
}

bool OperationSpec::parameter_free() const {
    switch (kind) {
        case OpKind::Identity:
        case OpKind::MaxPool3:
        case OpKind::AvgPool3:
        case OpKind::GaussianNoise:
        case OpKind::Dropout: return true;
        default: return false;
    }
}

std::vector<autograd::Shape> OperationSpec::param_shapes(std::size_t channels) const {
    switch (kind) {
        case OpKind::SepConv3:
        case OpKind::SepConv5:
            return {{channels, 1, kernel, kernel}, {channels, channels, 1, 1}, {channels}, {channels}};
        case OpKind::TransConv3:
        case OpKind::TransConv5:
        case OpKind::StretchedConv: return {{channels, channels, kernel, kernel}};
        default: return {};
    }
}

std::vector<OperationSpec> base_operations() {
    return {OperationSpec::identity(), OperationSpec::sep_conv(3), OperationSpec::sep_conv(5),
            OperationSpec::max_pool3(), OperationSpec::avg_pool3()};
}

}  // namespace ssp::layers
