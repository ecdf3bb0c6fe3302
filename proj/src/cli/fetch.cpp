#include <boost/iostreams/copy.hpp>
#include <boost/iostreams/device/array.hpp>
#include <boost/iostreams/device/back_inserter.hpp>
#include <boost/iostreams/filter/gzip.hpp>
#include <boost/iostreams/filtering_streambuf.hpp>
#include <httplib.h>

#include <regex>
#include <stdexcept>

#include "ssp/cli/cli.hpp"
#include "ssp/data/dataset.hpp"

namespace ssp::cli {
namespace {

constexpr std::size_t kTarBlock = 512;

std::uint64_t octal_field(const std::uint8_t* p, std::size_t len) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < len && p[i] != 0 && p[i] != ' '; ++i) {
        if (p[i] < '0' || p[i] > '7') throw std::runtime_error("tar: malformed size field");
        v = v * 8 + (p[i] - '0');
    }
    return v;
}

std::string c_field(const std::uint8_t* p, std::size_t len) {
    std::size_t n = 0;
    while (n < len && p[n] != 0) ++n;
    return std::string(reinterpret_cast<const char*>(p), n);
}

bool is_tar(const std::vector<std::uint8_t>& bytes) {
    return bytes.size() >= kTarBlock && c_field(bytes.data() + 257, 5) == "ustar";
}

}  // namespace

std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& data) {
    namespace io = boost::iostreams;
    std::vector<std::uint8_t> out;
    try {
        io::filtering_istreambuf in;
        in.push(io::gzip_decompressor());
        in.push(io::array_source(reinterpret_cast<const char*>(data.data()), data.size()));
        std::vector<char> buf;
        io::copy(in, io::back_inserter(buf));
        out.assign(buf.begin(), buf.end());
    } catch (const io::gzip_error& e) {
        throw std::runtime_error(std::string("gzip: ") + e.what());
    }
    return out;
}

std::vector<std::pair<std::string, std::vector<std::uint8_t>>> untar(const std::vector<std::uint8_t>& archive) {
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> members;
    std::size_t pos = 0;
    while (pos + kTarBlock <= archive.size()) {
        const std::uint8_t* h = archive.data() + pos;
        if (h[0] == 0) break;  // end-of-archive marker
        std::string name = c_field(h, 100);
        const std::string prefix = c_field(h + 345, 155);
        if (!prefix.empty()) name = prefix + "/" + name;
        const std::uint64_t size = octal_field(h + 124, 12);
        const char type = static_cast<char>(h[156]);
        pos += kTarBlock;
        if (pos + size > archive.size()) throw std::runtime_error("tar: member '" + name + "' is truncated");
        if (type == '0' || type == '\0') {
            members.emplace_back(name, std::vector<std::uint8_t>(archive.begin() + static_cast<std::ptrdiff_t>(pos),
                                                                 archive.begin() + static_cast<std::ptrdiff_t>(pos + size)));
        }
        pos += (size + kTarBlock - 1) / kTarBlock * kTarBlock;
    }
    return members;
}

FetchResult fetch_data(const std::string& url, const std::filesystem::path& dest) {
    static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, url_re)) throw std::runtime_error("fetch: unsupported URL '" + url + "'");
    const std::string path = m[2].matched ? m[2].str() : "/";

    httplib::Client client(m[1].str());
    client.set_follow_location(true);
    client.set_read_timeout(300, 0);
    const auto res = client.Get(path);
    if (!res) throw std::runtime_error("fetch: " + url + ": " + httplib::to_string(res.error()));
    if (res->status != 200) throw std::runtime_error("fetch: " + url + ": HTTP " + std::to_string(res->status));

    std::vector<std::uint8_t> body(res->body.begin(), res->body.end());
    if (body.size() >= 2 && body[0] == 0x1f && body[1] == 0x8b) body = gunzip(body);

    FetchResult result;
    std::filesystem::create_directories(dest);
    if (is_tar(body)) {
        for (auto& [name, bytes] : untar(body)) {
            const std::filesystem::path file = std::filesystem::path(name).filename();
            if (file.extension() != ".bin") continue;
            data::write_file(dest / file, bytes);
            result.files.push_back(dest / file);
        }
        return result;
    }
    std::string file = std::filesystem::path(path).filename().string();
    if (file.empty()) file = "download.bin";
    if (file.size() > 3 && file.ends_with(".gz")) file.resize(file.size() - 3);
    data::write_file(dest / file, body);
    result.files.push_back(dest / file);
    return result;
}

}  // namespace ssp::cli
