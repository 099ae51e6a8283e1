#include "latentsteer/activations.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "latentsteer/common.hpp"
#include "latentsteer/rng.hpp"

namespace latentsteer {

namespace {

constexpr char kActsMagic[16] = {'L', 'A', 'T', 'E', 'N', 'T', 'S', 'T',
                                 'E', 'E', 'R', '.', 'A', 'C', 'T', 'S'};
constexpr uint32_t kActsVersion = 1;

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_pod(std::istream& is, T& v, const char* field) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw FormatError(std::string("activations file truncated at ") + field);
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void ActivationSet::validate() const {
    if (activations.rows == 0 || activations.cols == 0) {
        throw FormatError("activation set is empty (T and d must be positive)");
    }
    if (tokens.size() != activations.rows) {
        throw FormatError("token metadata count does not match the activation row count");
    }
    for (double v : activations.data) {
        if (!std::isfinite(v)) throw FormatError("non-finite value in activations");
    }
    for (const TokenMeta& t : tokens) {
        if (t.window_id >= window_subject.size()) {
            throw FormatError("token references an unknown window_id");
        }
        if (t.subject_id != window_subject[t.window_id]) {
            throw FormatError("token subject_id disagrees with its window's subject");
        }
    }
    for (const auto& [name, labels] : concept_labels) {
        if (labels.size() != window_subject.size()) {
            throw FormatError("concept '" + name + "' is not labeled for every window");
        }
        for (uint8_t v : labels) {
            if (v > 1) throw FormatError("concept '" + name + "' has a non-binary label");
        }
    }
}

std::vector<uint32_t> ActivationSet::windows_with_label(const std::string& concept_name,
                                                        uint8_t value) const {
    const auto& labels = labels_for(concept_name);
    std::vector<uint32_t> out;
    for (uint32_t w = 0; w < labels.size(); ++w) {
        if (labels[w] == value) out.push_back(w);
    }
    return out;
}

std::vector<uint32_t> ActivationSet::tokens_of_windows(
    const std::vector<uint32_t>& windows) const {
    std::set<uint32_t> wanted(windows.begin(), windows.end());
    std::vector<uint32_t> out;
    for (uint32_t t = 0; t < tokens.size(); ++t) {
        if (wanted.count(tokens[t].window_id)) out.push_back(t);
    }
    return out;
}

std::vector<uint8_t> ActivationSet::token_labels(const std::string& concept_name) const {
    const auto& labels = labels_for(concept_name);
    std::vector<uint8_t> out(tokens.size());
    for (size_t t = 0; t < tokens.size(); ++t) out[t] = labels[tokens[t].window_id];
    return out;
}

const std::vector<uint8_t>& ActivationSet::labels_for(const std::string& concept_name) const {
    auto it = concept_labels.find(concept_name);
    if (it == concept_labels.end()) {
        throw std::invalid_argument("unknown concept '" + concept_name + "'");
    }
    return it->second;
}

void write_activations(const ActivationSet& set, const std::string& path) {
    set.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");

    os.write(kActsMagic, sizeof(kActsMagic));
    write_pod(os, kActsVersion);
    write_pod(os, static_cast<uint64_t>(set.activations.rows));
    write_pod(os, static_cast<uint32_t>(set.activations.cols));
    write_pod(os, static_cast<int32_t>(set.layer_index));

    std::vector<float> row(set.activations.cols);
    for (size_t r = 0; r < set.activations.rows; ++r) {
        auto src = set.activations.row(r);
        for (size_t c = 0; c < row.size(); ++c) row[c] = static_cast<float>(src[c]);
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size() * sizeof(float)));
    }

    std::ostringstream meta;
    meta << "sample_rate_hz\t" << format_double(set.sample_rate_hz) << "\n";
    meta << "n_windows\t" << set.window_subject.size() << "\n";
    for (uint32_t w = 0; w < set.window_subject.size(); ++w) {
        meta << "window\t" << w << " " << set.window_subject[w] << "\n";
    }
    for (const TokenMeta& t : set.tokens) {
        meta << "token\t" << t.window_id << " " << t.channel_id << "\n";
    }
    for (const auto& [name, labels] : set.concept_labels) {
        for (uint32_t w = 0; w < labels.size(); ++w) {
            meta << "label\t" << name << " " << w << " " << int(labels[w]) << "\n";
        }
    }
    std::string meta_str = meta.str();
    write_pod(os, static_cast<uint64_t>(meta_str.size()));
    os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    if (!os) throw FormatError("short write to '" + path + "'");
}

ActivationSet load_activations(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "'");

    char magic[16];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kActsMagic, sizeof(magic)) != 0) {
        throw FormatError("missing magic: '" + path + "' is not a .acts file");
    }
    uint32_t version;
    read_pod(is, version, "version");
    if (version != kActsVersion) {
        throw FormatError("unsupported .acts version " + std::to_string(version));
    }
    uint64_t t_count;
    uint32_t dim;
    int32_t layer;
    read_pod(is, t_count, "token count");
    read_pod(is, dim, "dimension");
    read_pod(is, layer, "layer index");
    if (t_count == 0 || dim == 0) throw FormatError("header declares an empty matrix");

    ActivationSet set;
    set.layer_index = layer;
    set.activations = Matrix(t_count, dim);
    std::vector<float> row(dim);
    for (uint64_t r = 0; r < t_count; ++r) {
        is.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(float)));
        if (!is) {
            throw FormatError("truncated matrix: header declares " + std::to_string(t_count) +
                              " rows but row " + std::to_string(r) + " is incomplete");
        }
        auto dst = set.activations.row(r);
        for (size_t c = 0; c < dim; ++c) {
            if (!std::isfinite(row[c])) throw FormatError("non-finite value in activations");
            dst[c] = row[c];
        }
    }

    uint64_t meta_len;
    read_pod(is, meta_len, "metadata length");
    std::string meta(meta_len, '\0');
    is.read(meta.data(), static_cast<std::streamsize>(meta_len));
    if (!is) throw FormatError("truncated metadata block");

    set.tokens.reserve(t_count);
    std::istringstream lines(meta);
    std::string line;
    size_t line_no = 0;
    while (std::getline(lines, line)) {
        ++line_no;
        if (line.empty()) continue;
        size_t tab = line.find('\t');
        if (tab == std::string::npos) {
            throw FormatError("metadata line " + std::to_string(line_no) + " has no tab separator");
        }
        std::string key = line.substr(0, tab);
        std::istringstream value(line.substr(tab + 1));
        if (key == "sample_rate_hz") {
            value >> set.sample_rate_hz;
        } else if (key == "n_windows") {
            size_t n;
            value >> n;
            set.window_subject.assign(n, 0);
        } else if (key == "window") {
            uint32_t w, subject;
            value >> w >> subject;
            if (!value || w >= set.window_subject.size()) {
                throw FormatError("bad 'window' record at metadata line " + std::to_string(line_no));
            }
            set.window_subject[w] = subject;
        } else if (key == "token") {
            uint32_t w;
            int32_t channel;
            value >> w >> channel;
            if (!value || w >= set.window_subject.size()) {
                throw FormatError("bad 'token' record at metadata line " + std::to_string(line_no));
            }
            set.tokens.push_back({w, set.window_subject[w], channel});
        } else if (key == "label") {
            std::string name;
            uint32_t w;
            int v;
            value >> name >> w >> v;
            if (!value || w >= set.window_subject.size() || v < 0 || v > 1) {
                throw FormatError("bad 'label' record at metadata line " + std::to_string(line_no));
            }
            auto& labels = set.concept_labels[name];
            if (labels.empty()) labels.assign(set.window_subject.size(), 0);
            labels[w] = static_cast<uint8_t>(v);
        } else {
            throw FormatError("unknown metadata key '" + key + "'");
        }
    }
    if (set.tokens.size() != t_count) {
        throw FormatError("metadata lists " + std::to_string(set.tokens.size()) +
                          " tokens but the header declares " + std::to_string(t_count));
    }
    set.validate();
    return set;
}

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

std::vector<uint32_t> SplitAssignment::subjects_in(Split s) const {
    std::vector<uint32_t> out;
    for (const auto& [subject, split] : assignment) {
        if (split == s) out.push_back(subject);
    }
    return out;
}

std::vector<uint32_t> SplitAssignment::windows_in(const ActivationSet& set, Split s) const {
    std::vector<uint32_t> out;
    for (uint32_t w = 0; w < set.window_subject.size(); ++w) {
        auto it = assignment.find(set.window_subject[w]);
        if (it != assignment.end() && it->second == s) out.push_back(w);
    }
    return out;
}

SplitAssignment split_by_subject(const ActivationSet& set, double train_frac, double val_frac,
                                 double test_frac, uint64_t seed) {
    const double fracs[3] = {train_frac, val_frac, test_frac};
    double sum = fracs[0] + fracs[1] + fracs[2];
    for (double f : fracs) {
        if (!(f > 0.0)) throw std::invalid_argument("split fractions must be positive");
    }
    if (std::fabs(sum - 1.0) > 1e-9) {
        throw std::invalid_argument("split fractions must sum to 1");
    }

    std::set<uint32_t> subject_set;
    for (const TokenMeta& t : set.tokens) subject_set.insert(t.subject_id);
    std::vector<uint32_t> subjects(subject_set.begin(), subject_set.end());  // ascending
    if (subjects.size() < 3) {
        throw std::invalid_argument("need at least 3 subjects to form 3 disjoint splits");
    }

    // Largest-remainder rounding of the per-split subject counts; remainder
    // ties go to the lower split index.
    const size_t n = subjects.size();
    size_t counts[3];
    double remainders[3];
    size_t assigned = 0;
    for (int s = 0; s < 3; ++s) {
        double exact = fracs[s] * static_cast<double>(n);
        counts[s] = static_cast<size_t>(exact);
        remainders[s] = exact - static_cast<double>(counts[s]);
        assigned += counts[s];
    }
    while (assigned < n) {
        int best = 0;
        for (int s = 1; s < 3; ++s) {
            if (remainders[s] > remainders[best]) best = s;
        }
        counts[best] += 1;
        remainders[best] = -1.0;
        ++assigned;
    }

    Rng rng(seed);
    rng.shuffle(subjects);

    SplitAssignment out;
    out.fractions[0] = train_frac;
    out.fractions[1] = val_frac;
    out.fractions[2] = test_frac;
    out.seed = seed;
    size_t pos = 0;
    for (int s = 0; s < 3; ++s) {
        for (size_t i = 0; i < counts[s]; ++i) {
            out.assignment[subjects[pos++]] = static_cast<Split>(s);
        }
    }
    return out;
}

}  // namespace latentsteer
