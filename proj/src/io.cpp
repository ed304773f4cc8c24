#include "bikevol/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bikevol/errors.hpp"
#include "bikevol/rng.hpp"
#include "bikevol/targets.hpp"

namespace bikevol::io {

namespace fs = std::filesystem;
using core::DenseMatrix;

// -- CSV ----------------------------------------------------------------------

CsvTable parse_csv(const std::string& text, const std::string& where) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::size_t> record_lines;
    std::vector<std::string> record;
    std::string field;
    bool in_quotes = false, was_quoted = false, after_close = false;
    std::size_t line = 1, col = 1, record_line = 1;

    auto fail = [&](std::size_t l, std::size_t c, const std::string& msg) {
        throw ParseError(where + ":" + std::to_string(l) + ":" + std::to_string(c), msg);
    };
    auto end_field = [&]() {
        record.push_back(std::move(field));
        field.clear();
        was_quoted = after_close = false;
    };
    auto end_record = [&]() {
        end_field();
        records.push_back(std::move(record));
        record_lines.push_back(record_line);
        record.clear();
        record_line = line + 1;
    };

    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < n && text[i + 1] == '"') {
                    field += '"';
                    i += 2;
                    col += 2;
                } else {
                    in_quotes = false;
                    after_close = true;
                    ++i;
                    ++col;
                }
            } else {
                field += c;
                ++i;
                if (c == '\n') {
                    ++line;
                    col = 1;
                } else {
                    ++col;
                }
            }
            continue;
        }
        switch (c) {
            case '"':
                if (!field.empty() || after_close) fail(line, col, "unexpected quote in field");
                in_quotes = true;
                was_quoted = true;
                ++i;
                ++col;
                break;
            case ',':
                end_field();
                ++i;
                ++col;
                break;
            case '\r':
                ++i;
                ++col;
                if (i < n && text[i] == '\n') break;  // consumed with the \n next
                end_record();
                ++line;
                col = 1;
                break;
            case '\n':
                end_record();
                ++i;
                ++line;
                col = 1;
                break;
            default:
                if (after_close) fail(line, col, "text after closing quote");
                field += c;
                ++i;
                ++col;
        }
    }
    if (in_quotes) fail(line, col, "unterminated quoted field");
    if (!field.empty() || was_quoted || !record.empty()) end_record();

    if (records.empty()) throw ParseError(where, "empty file");
    CsvTable table;
    table.header = std::move(records.front());
    for (std::size_t r = 1; r < records.size(); ++r) {
        if (records[r].size() != table.header.size())
            fail(record_lines[r], 1,
                 "expected " + std::to_string(table.header.size()) + " fields, found " +
                     std::to_string(records[r].size()));
        table.rows.push_back(std::move(records[r]));
    }
    return table;
}

CsvTable read_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_csv(text, fs::path(path).filename().string());
}

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

}  // namespace

std::string format_csv(const CsvTable& table) {
    std::string out;
    auto emit = [&](const std::vector<std::string>& row) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i > 0) out += ',';
            out += csv_field(row[i]);
        }
        out += '\n';
    };
    emit(table.header);
    for (const auto& row : table.rows) emit(row);
    return out;
}

void write_csv(const std::string& path, const CsvTable& table) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << format_csv(table);
    if (!out) throw IoError("failed while writing " + path);
}

// -- Dataset bundle -------------------------------------------------------------

namespace {

void expect_header(const CsvTable& t, const std::vector<std::string>& want,
                   const std::string& where) {
    if (t.header != want) {
        std::string msg = "header must be";
        for (const auto& h : want) msg += " " + h;
        throw ParseError(where, msg);
    }
}

std::int64_t parse_count(const std::string& s, const std::string& where, std::size_t row) {
    errno = 0;
    char* end = nullptr;
    const long long v = std::strtoll(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0' || errno != 0)
        throw DataError(where + " row " + std::to_string(row) + ": bad count '" + s + "'");
    if (v < 0)
        throw DataError(where + " row " + std::to_string(row) + ": negative count");
    return v;
}

double parse_double(const std::string& s, const std::string& where, std::size_t row) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0' || !std::isfinite(v))
        throw DataError(where + " row " + std::to_string(row) + ": bad number '" + s + "'");
    return v;
}

}  // namespace

Dataset load_dataset(const std::string& dir) {
    const fs::path base(dir);
    CsvTable nodes = read_csv((base / "nodes.csv").string());
    if (nodes.header.empty() || nodes.header[0] != "segment_id")
        throw ParseError("nodes.csv", "first column must be segment_id");
    if (nodes.header.size() < 2) throw ParseError("nodes.csv", "no feature columns");

    std::vector<std::string> ids;
    std::unordered_map<std::string, std::uint32_t> index_of;
    graph::RawTable raw;
    raw.column_names.assign(nodes.header.begin() + 1, nodes.header.end());
    for (std::size_t r = 0; r < nodes.rows.size(); ++r) {
        const auto& row = nodes.rows[r];
        if (!index_of.emplace(row[0], static_cast<std::uint32_t>(r)).second)
            throw DataError("nodes.csv row " + std::to_string(r + 1) + ": duplicate segment id '" +
                            row[0] + "'");
        ids.push_back(row[0]);
        raw.rows.emplace_back(row.begin() + 1, row.end());
    }

    graph::FeatureSchema schema = graph::infer_schema(raw);
    DenseMatrix features = graph::encode_features(raw, schema);

    CsvTable edges_csv = read_csv((base / "edges.csv").string());
    expect_header(edges_csv, {"segment_id_a", "segment_id_b"}, "edges.csv");
    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
    for (std::size_t r = 0; r < edges_csv.rows.size(); ++r) {
        const auto& row = edges_csv.rows[r];
        auto a = index_of.find(row[0]);
        auto b = index_of.find(row[1]);
        if (a == index_of.end() || b == index_of.end())
            throw DataError("edges.csv row " + std::to_string(r + 1) + ": unknown segment id");
        if (a->second == b->second)
            throw DataError("edges.csv row " + std::to_string(r + 1) + ": segment linked to itself");
        edges.emplace_back(a->second, b->second);
    }

    CsvTable labels_csv = read_csv((base / "labels.csv").string());
    expect_header(labels_csv, {"segment_id", "date", "count"}, "labels.csv");
    std::vector<std::uint32_t> labeled;
    std::unordered_map<std::uint32_t, std::vector<std::int64_t>> counts;
    for (std::size_t r = 0; r < labels_csv.rows.size(); ++r) {
        const auto& row = labels_csv.rows[r];
        auto it = index_of.find(row[0]);
        if (it == index_of.end())
            throw DataError("labels.csv row " + std::to_string(r + 1) + ": unknown segment id '" +
                            row[0] + "'");
        auto [slot, fresh] = counts.try_emplace(it->second);
        if (fresh) labeled.push_back(it->second);
        slot->second.push_back(parse_count(row[2], "labels.csv", r + 1));
    }
    if (labeled.empty()) throw DataError("labels.csv: no labeled segments");

    std::vector<double> adb;
    adb.reserve(labeled.size());
    for (std::uint32_t node : labeled)
        adb.push_back(static_cast<double>(graph::compute_adb(counts[node])));
    std::vector<int> classes = graph::quantile_classes(adb, 5);

    std::vector<double> oracle;
    CsvTable truth;
    const fs::path truth_path = base / "ground_truth.csv";
    if (fs::exists(truth_path)) {
        truth = read_csv(truth_path.string());
        expect_header(truth, {"segment_id", "adb"}, "ground_truth.csv");
        oracle.assign(ids.size(), -1.0);
        for (std::size_t r = 0; r < truth.rows.size(); ++r) {
            auto it = index_of.find(truth.rows[r][0]);
            if (it == index_of.end())
                throw DataError("ground_truth.csv row " + std::to_string(r + 1) +
                                ": unknown segment id");
            if (oracle[it->second] >= 0.0)
                throw DataError("ground_truth.csv row " + std::to_string(r + 1) +
                                ": duplicate segment id");
            oracle[it->second] = parse_double(truth.rows[r][1], "ground_truth.csv", r + 1);
        }
        for (std::size_t i = 0; i < oracle.size(); ++i)
            if (oracle[i] < 0.0)
                throw DataError("ground_truth.csv: no row for segment '" + ids[i] + "'");
    }

    return Dataset{graph::RoadGraph(std::move(edges), std::move(features), std::move(ids)),
                   graph::make_label_set(labeled, adb, classes, nodes.rows.size()),
                   std::move(schema),
                   std::move(oracle),
                   std::move(nodes),
                   std::move(edges_csv),
                   std::move(labels_csv),
                   std::move(truth)};
}

void save_dataset(const std::string& dir, const Dataset& ds) {
    const fs::path base(dir);
    fs::create_directories(base);
    write_csv((base / "nodes.csv").string(), ds.nodes_table);
    write_csv((base / "edges.csv").string(), ds.edges_table);
    write_csv((base / "labels.csv").string(), ds.labels_table);
    if (!ds.truth_table.header.empty())
        write_csv((base / "ground_truth.csv").string(), ds.truth_table);
}

// -- Synthetic dataset generator ------------------------------------------------

namespace {

std::string seg_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "seg_%05zu", i);
    return buf;
}

std::string fixed(double v, int digits) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

}  // namespace

void generate_dataset(const std::string& dir, const GeneratorConfig& cfg) {
    if (cfg.n_nodes < 2) throw ConfigError("generator: need at least two segments");
    if (cfg.days < 1 || cfg.days > 28) throw ConfigError("generator: days must lie in 1..28");
    if (!(cfg.label_fraction > 0.0 && cfg.label_fraction <= 1.0))
        throw ConfigError("generator: label_fraction must lie in (0, 1]");

    // Street lattice: g x g intersections, segments between neighbors.
    std::size_t grid = 2;
    while (2 * grid * grid - 2 * grid < cfg.n_nodes) ++grid;
    struct Seg {
        std::uint32_t a, b;
    };
    std::vector<Seg> segs;
    auto xid = [&](std::size_t x, std::size_t y) {
        return static_cast<std::uint32_t>(y * grid + x);
    };
    for (std::size_t y = 0; y < grid; ++y)
        for (std::size_t x = 0; x < grid; ++x) {
            if (x + 1 < grid) segs.push_back({xid(x, y), xid(x + 1, y)});
            if (y + 1 < grid) segs.push_back({xid(x, y), xid(x, y + 1)});
        }

    std::vector<std::vector<std::uint32_t>> incident(grid * grid);
    for (std::uint32_t s = 0; s < segs.size(); ++s) {
        incident[segs[s].a].push_back(s);
        incident[segs[s].b].push_back(s);
    }

    // Seeded thinning to the exact node count; a removal is skipped when it
    // would leave some remaining segment without any neighbor.
    std::vector<char> alive(segs.size(), 1);
    std::size_t count = segs.size();
    auto alive_at = [&](std::uint32_t p) {
        std::size_t c = 0;
        for (std::uint32_t s : incident[p]) c += alive[s];
        return c;
    };
    core::RngStream removal = core::derive_stream(cfg.seed, "gen.remove");
    std::vector<std::uint32_t> order(segs.size());
    std::iota(order.begin(), order.end(), 0u);
    removal.shuffle(order);
    bool progress = true;
    while (count > cfg.n_nodes && progress) {
        progress = false;
        for (std::uint32_t s : order) {
            if (count == cfg.n_nodes) break;
            if (!alive[s]) continue;
            alive[s] = 0;
            bool ok = true;
            for (std::uint32_t p : {segs[s].a, segs[s].b}) {
                for (std::uint32_t t : incident[p]) {
                    if (!alive[t]) continue;
                    if (alive_at(segs[t].a) == 1 && alive_at(segs[t].b) == 1) {
                        ok = false;
                        break;
                    }
                }
                if (!ok) break;
            }
            if (ok) {
                --count;
                progress = true;
            } else {
                alive[s] = 1;
            }
        }
    }
    if (count != cfg.n_nodes)
        throw ContractError("generator: lattice cannot be thinned to the requested size");

    std::vector<std::uint32_t> node_of(segs.size(), 0);
    std::vector<std::uint32_t> kept;
    for (std::uint32_t s = 0; s < segs.size(); ++s)
        if (alive[s]) {
            node_of[s] = static_cast<std::uint32_t>(kept.size());
            kept.push_back(s);
        }

    CsvTable edges_csv;
    edges_csv.header = {"segment_id_a", "segment_id_b"};
    std::vector<std::vector<std::uint32_t>> nbrs(kept.size());
    for (std::size_t p = 0; p < incident.size(); ++p) {
        std::vector<std::uint32_t> here;
        for (std::uint32_t s : incident[p])
            if (alive[s]) here.push_back(node_of[s]);
        std::sort(here.begin(), here.end());
        for (std::size_t i = 0; i < here.size(); ++i)
            for (std::size_t j = i + 1; j < here.size(); ++j) {
                edges_csv.rows.push_back({seg_name(here[i]), seg_name(here[j])});
                nbrs[here[i]].push_back(here[j]);
                nbrs[here[j]].push_back(here[i]);
            }
    }

    // Planted features and the volume they induce.
    core::RngStream feat = core::derive_stream(cfg.seed, "gen.features");
    core::RngStream count_rng = core::derive_stream(cfg.seed, "gen.counts");
    const double center = (static_cast<double>(grid) - 1.0) / 2.0;

    CsvTable nodes_csv;
    nodes_csv.header = {"segment_id",      "road_type",  "land_use",       "pavement",
                        "lighting",        "slope_pct",  "speed_limit_kmh", "lane_count",
                        "dist_center_km",  "lts",        "infrastructure",  "separation",
                        "buffer_m",        "transit_access"};
    CsvTable truth_csv;
    truth_csv.header = {"segment_id", "adb"};
    std::vector<std::vector<std::int64_t>> daily(kept.size());
    std::vector<std::int64_t> adb_true(kept.size());

    // Five concentric road classes around the city center set a ceiling
    // volume that grows inward. Segments without bike infrastructure lose a
    // fixed 70 riders a day. Transit nearby cuts both ways: when the
    // strongest stop adjacent to a segment is a bus stop, short bike trips
    // shift to the bus and the segment loses a further 90 riders, while a
    // rail station feeds last-mile cycling and no transit at all leaves
    // riders no alternative, so neither costs anything. The class is
    // readable from a segment's own columns, the infrastructure penalty
    // only from its own row, and the bus penalty only from the strongest
    // entry in the neighbors' rows.
    static const char* const kRoadType[5] = {"service", "residential", "collector", "arterial",
                                             "primary"};
    static const char* const kLandUse[5] = {"industrial", "suburban", "mixed", "commercial",
                                            "core"};
    static const char* const kPavement[5] = {"gravel", "chipseal", "asphalt", "concrete",
                                             "porous"};
    static const char* const kLighting[5] = {"none", "sparse", "partial", "full", "continuous"};
    static const int kDistKm[5] = {9, 7, 5, 3, 1};
    static const int kBaseLts[5] = {1, 1, 2, 3, 4};
    static const double kVol[5] = {45.0, 230.0, 420.0, 615.0, 820.0};
    static const double kSpillPen[3] = {0.0, -90.0, 0.0};

    std::vector<std::size_t> level_of(kept.size(), 0);
    std::vector<int> transit(kept.size(), 0);
    std::vector<double> infra_pen(kept.size(), 0.0);

    for (std::size_t k = 0; k < kept.size(); ++k) {
        const Seg& s = segs[kept[k]];
        const double ax = s.a % grid, ay = s.a / grid;
        const double bx = s.b % grid, by = s.b / grid;
        const double mx = (ax + bx) / 2.0, my = (ay + by) / 2.0;

        const double ring = std::max(std::abs(mx - center), std::abs(my - center)) /
                            std::max(center, 1.0);
        std::size_t level = 0;  // outskirts
        if (ring < std::sqrt(0.2)) level = 4;  // downtown
        else if (ring < std::sqrt(0.4)) level = 3;
        else if (ring < std::sqrt(0.6)) level = 2;
        else if (ring < std::sqrt(0.8)) level = 1;
        level_of[k] = level;
        const std::string road_type = kRoadType[level];
        const int speed = 60 - 10 * static_cast<int>(level);
        const int lanes = 1 + static_cast<int>(level);
        // The city sits in a basin: grades steepen toward the outskirts.
        const double slope = 0.8 * static_cast<double>(4 - static_cast<int>(level));

        std::string infra = "none";
        const double u_inf = feat.uniform();
        const double p_any = 0.73 + 0.02 * static_cast<double>(level);
        if (u_inf < p_any) infra = (level >= 3 && u_inf < 0.4 * p_any) ? "track" : "lane";
        infra_pen[k] = infra == "none" ? -70.0 : 0.0;
        const char* separation = infra == "none" ? "none" : (infra == "lane" ? "paint" : "curb");
        const double buffer_m = infra == "none" ? 0.0 : (infra == "lane" ? 0.5 : 2.0);

        int lts = kBaseLts[level];
        if (infra == "track") lts -= 2;
        else if (infra == "lane") lts -= 1;
        if (feat.uniform() < 0.10) lts += 1;
        lts = std::clamp(lts, 1, 4);

        const double u_transit = feat.uniform();
        transit[k] = u_transit < 0.20 ? 2 : (u_transit < 0.60 ? 1 : 0);

        nodes_csv.rows.push_back({seg_name(k), road_type, kLandUse[level], kPavement[level],
                                  kLighting[level], fixed(slope, 1), std::to_string(speed),
                                  std::to_string(lanes), std::to_string(kDistKm[level]),
                                  std::to_string(lts), infra, separation, fixed(buffer_m, 1),
                                  std::to_string(transit[k])});
    }

    for (std::size_t k = 0; k < kept.size(); ++k) {
        int strongest = 0;
        for (std::uint32_t j : nbrs[k]) strongest = std::max(strongest, transit[j]);
        const double volume = kVol[level_of[k]] + infra_pen[k] + kSpillPen[strongest];

        // Daily jitter in balanced pairs so the mean stays exactly on the
        // planted volume and the rounded average is stable across segments
        // that share a volume cell.
        const auto atom = std::max<std::int64_t>(1, std::llround(volume));
        std::vector<std::int64_t> delta(cfg.days, 0);
        for (std::size_t d = 0; d + 1 < cfg.days; d += 2) {
            const auto e = std::llround(static_cast<double>(atom) * 0.02 *
                                        std::abs(count_rng.normal()));
            delta[d] = e;
            delta[d + 1] = -e;
        }
        count_rng.shuffle(delta);
        daily[k].reserve(cfg.days);
        for (std::size_t d = 0; d < cfg.days; ++d) daily[k].push_back(atom + delta[d]);
        adb_true[k] = graph::compute_adb(daily[k]);
        truth_csv.rows.push_back({seg_name(k), std::to_string(adb_true[k])});
    }

    const std::size_t n_labeled = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(cfg.label_fraction * cfg.n_nodes)));
    core::RngStream label_rng = core::derive_stream(cfg.seed, "gen.labels");
    // Counting campaigns cover every road class, so spread the labeled
    // segments round-robin across the five rings instead of sampling the
    // whole city uniformly.
    std::vector<std::vector<std::uint32_t>> by_level(5);
    for (std::size_t k = 0; k < kept.size(); ++k)
        by_level[level_of[k]].push_back(static_cast<std::uint32_t>(k));
    for (auto& bucket : by_level) label_rng.shuffle(bucket);
    std::vector<std::uint32_t> labeled;
    labeled.reserve(n_labeled);
    for (std::size_t round = 0; labeled.size() < n_labeled; ++round) {
        bool any = false;
        for (const auto& bucket : by_level) {
            if (round < bucket.size()) {
                any = true;
                labeled.push_back(bucket[round]);
                if (labeled.size() == n_labeled) break;
            }
        }
        if (!any) break;
    }
    std::sort(labeled.begin(), labeled.end());

    CsvTable labels_csv;
    labels_csv.header = {"segment_id", "date", "count"};
    for (std::uint32_t k : labeled)
        for (std::size_t d = 0; d < cfg.days; ++d) {
            char date[16];
            std::snprintf(date, sizeof(date), "2024-01-%02zu", d + 1);
            labels_csv.rows.push_back({seg_name(k), date, std::to_string(daily[k][d])});
        }

    fs::create_directories(dir);
    write_csv((fs::path(dir) / "nodes.csv").string(), nodes_csv);
    write_csv((fs::path(dir) / "edges.csv").string(), edges_csv);
    write_csv((fs::path(dir) / "labels.csv").string(), labels_csv);
    write_csv((fs::path(dir) / "ground_truth.csv").string(), truth_csv);
}

// -- GraphML import ---------------------------------------------------------------

namespace {

std::size_t line_at(const std::string& text, std::size_t pos) {
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + pos, '\n'));
}

// Value of key="..." inside one tag body; empty string when absent.
std::string attr_value(const std::string& tag, const std::string& key) {
    const std::string needle = key + "=\"";
    std::size_t at = tag.find(needle);
    while (at != std::string::npos &&
           at > 0 && std::isalnum(static_cast<unsigned char>(tag[at - 1])))
        at = tag.find(needle, at + 1);  // suffix of a longer attribute name
    if (at == std::string::npos) return "";
    const std::size_t start = at + needle.size();
    const std::size_t stop = tag.find('"', start);
    if (stop == std::string::npos) return "";
    return tag.substr(start, stop - start);
}

}  // namespace

PrimalGraph parse_graphml(const std::string& text, const std::string& where) {
    PrimalGraph out;
    std::unordered_map<std::string, std::uint32_t> index_of;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> seen;

    std::size_t i = 0;
    while ((i = text.find('<', i)) != std::string::npos) {
        const std::size_t stop = text.find('>', i);
        if (stop == std::string::npos)
            throw ParseError(where + ":" + std::to_string(line_at(text, i)), "unterminated tag");
        const std::string tag = text.substr(i + 1, stop - i - 1);
        const std::size_t line = line_at(text, i);
        i = stop + 1;

        if (tag.rfind("node", 0) == 0 && (tag.size() == 4 || !std::isalnum(static_cast<unsigned char>(tag[4])))) {
            const std::string id = attr_value(tag, "id");
            if (id.empty())
                throw ParseError(where + ":" + std::to_string(line), "node without id");
            if (!index_of.emplace(id, static_cast<std::uint32_t>(out.node_ids.size())).second)
                throw ParseError(where + ":" + std::to_string(line), "duplicate node id '" + id + "'");
            out.node_ids.push_back(id);
        } else if (tag.rfind("edge", 0) == 0 && (tag.size() == 4 || !std::isalnum(static_cast<unsigned char>(tag[4])))) {
            const std::string src = attr_value(tag, "source");
            const std::string dst = attr_value(tag, "target");
            if (src.empty() || dst.empty())
                throw ParseError(where + ":" + std::to_string(line), "edge without source/target");
            auto a = index_of.find(src);
            auto b = index_of.find(dst);
            if (a == index_of.end() || b == index_of.end())
                throw ParseError(where + ":" + std::to_string(line),
                                 "edge endpoint not declared as a node");
            if (a->second == b->second)
                throw ParseError(where + ":" + std::to_string(line), "self-loop edge unsupported");
            seen.emplace_back(std::min(a->second, b->second), std::max(a->second, b->second));
        }
    }
    if (out.node_ids.empty()) throw ParseError(where, "no node elements");

    // Parallel edges describe the same physical street; keep one.
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    out.edges = std::move(seen);
    return out;
}

PrimalGraph read_graphml(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_graphml(text, fs::path(path).filename().string());
}

LineGraph line_graph(const PrimalGraph& primal) {
    LineGraph out;
    out.segment_ids.reserve(primal.edges.size());
    for (const auto& [a, b] : primal.edges)
        out.segment_ids.push_back(primal.node_ids[a] + "|" + primal.node_ids[b]);

    std::vector<std::vector<std::uint32_t>> incident(primal.node_ids.size());
    for (std::uint32_t s = 0; s < primal.edges.size(); ++s) {
        incident[primal.edges[s].first].push_back(s);
        incident[primal.edges[s].second].push_back(s);
    }
    for (const auto& here : incident)
        for (std::size_t i = 0; i < here.size(); ++i)
            for (std::size_t j = i + 1; j < here.size(); ++j)
                out.edges.emplace_back(std::min(here[i], here[j]), std::max(here[i], here[j]));
    std::sort(out.edges.begin(), out.edges.end());
    return out;
}

// -- Checkpoint -------------------------------------------------------------------

std::uint32_t crc32(std::string_view bytes) {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t n = 0; n < 256; ++n) {
            std::uint32_t c = n;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[n] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (unsigned char c : bytes) crc = table[(crc ^ c) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

namespace {

constexpr char kMagic[4] = {'B', 'V', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s += static_cast<char>((v >> (8 * i)) & 0xFF);
}

void put_u64(std::string& s, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) s += static_cast<char>((v >> (8 * i)) & 0xFF);
}

void put_f64(std::string& s, double v) { put_u64(s, std::bit_cast<std::uint64_t>(v)); }

void put_str(std::string& s, const std::string& v) {
    put_u64(s, v.size());
    s += v;
}

void put_mat(std::string& s, const DenseMatrix& m) {
    put_u64(s, m.rows);
    put_u64(s, m.cols);
    for (double v : m.data) put_f64(s, v);
}

struct ByteReader {
    std::string_view s;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > s.size()) throw DataError("checkpoint truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(
            static_cast<unsigned char>(s[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(
            static_cast<unsigned char>(s[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint64_t n = u64();
        need(n);
        std::string v(s.substr(pos, n));
        pos += n;
        return v;
    }
    DenseMatrix mat() {
        const std::uint64_t r = u64(), c = u64();
        if (r > (1u << 24) || c > (1u << 24)) throw DataError("checkpoint matrix too large");
        need(r * c * 8);
        DenseMatrix m(r, c);
        for (double& v : m.data) v = f64();
        return m;
    }
};

}  // namespace

Checkpoint make_checkpoint(const train::TrainConfig& cfg, std::uint64_t schema_fingerprint,
                           const train::FoldArtifacts& fold) {
    Checkpoint ck;
    ck.schema_fingerprint = schema_fingerprint;
    ck.config = cfg;
    ck.fold = fold.result.fold;
    ck.test_nodes = fold.test_nodes;
    ck.scaler_lo = fold.scaler.lo();
    ck.scaler_hi = fold.scaler.hi();
    ck.in_dim = fold.model.in_dim;
    for (const auto& [name, mat] : fold.model.named_parameters())
        ck.weights.emplace_back(name, *mat);
    ck.synthetic_requested = fold.aug.requested;
    ck.synthetic_features = fold.aug.synthetic_features;
    ck.synthetic_edges = fold.aug.synthetic_edges;
    ck.pseudo_adb = fold.aug.pseudo_adb;
    ck.pseudo_class = fold.aug.pseudo_class;
    return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string payload;
    put_u64(payload, ckpt.schema_fingerprint);
    put_str(payload, train::config_to_json(ckpt.config).dump());
    put_u64(payload, ckpt.fold);
    put_u64(payload, ckpt.test_nodes.size());
    for (std::uint32_t v : ckpt.test_nodes) put_u32(payload, v);
    put_f64(payload, ckpt.scaler_lo);
    put_f64(payload, ckpt.scaler_hi);
    put_u64(payload, ckpt.in_dim);
    put_u64(payload, ckpt.weights.size());
    for (const auto& [name, mat] : ckpt.weights) {
        put_str(payload, name);
        put_mat(payload, mat);
    }
    put_u64(payload, ckpt.synthetic_requested);
    put_mat(payload, ckpt.synthetic_features);
    put_u64(payload, ckpt.synthetic_edges.size());
    for (const auto& [s, a] : ckpt.synthetic_edges) {
        put_u32(payload, s);
        put_u32(payload, a);
    }
    put_u64(payload, ckpt.pseudo_adb.size());
    for (double v : ckpt.pseudo_adb) put_f64(payload, v);
    put_u64(payload, ckpt.pseudo_class.size());
    for (int v : ckpt.pseudo_class) put_u32(payload, static_cast<std::uint32_t>(v));

    std::string file(kMagic, 4);
    put_u32(file, kVersion);
    put_u64(file, payload.size());
    file += payload;
    put_u32(file, crc32(payload));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write(file.data(), static_cast<std::streamsize>(file.size()));
    if (!out) throw IoError("failed while writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (file.size() < 16 || std::memcmp(file.data(), kMagic, 4) != 0)
        throw DataError("not a checkpoint file");
    ByteReader head{file, 4};
    const std::uint32_t version = head.u32();
    if (version != kVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t payload_len = head.u64();
    if (file.size() != 16 + payload_len + 4) throw DataError("checkpoint truncated");
    const std::string_view payload(file.data() + 16, payload_len);
    ByteReader tail{file, 16 + payload_len};
    if (tail.u32() != crc32(payload)) throw DataError("checkpoint checksum mismatch");

    ByteReader r{payload, 0};
    Checkpoint ck;
    ck.schema_fingerprint = r.u64();
    try {
        ck.config = train::config_from_json(nlohmann::json::parse(r.str()));
    } catch (const nlohmann::json::exception&) {
        throw DataError("checkpoint config corrupt");
    }
    ck.fold = r.u64();
    const std::uint64_t n_test = r.u64();
    for (std::uint64_t i = 0; i < n_test; ++i) ck.test_nodes.push_back(r.u32());
    ck.scaler_lo = r.f64();
    ck.scaler_hi = r.f64();
    ck.in_dim = r.u64();
    const std::uint64_t n_weights = r.u64();
    for (std::uint64_t i = 0; i < n_weights; ++i) {
        std::string name = r.str();
        ck.weights.emplace_back(std::move(name), r.mat());
    }
    ck.synthetic_requested = r.u64();
    ck.synthetic_features = r.mat();
    const std::uint64_t n_edges = r.u64();
    for (std::uint64_t i = 0; i < n_edges; ++i) {
        const std::uint32_t s = r.u32();
        const std::uint32_t a = r.u32();
        ck.synthetic_edges.emplace_back(s, a);
    }
    const std::uint64_t n_adb = r.u64();
    for (std::uint64_t i = 0; i < n_adb; ++i) ck.pseudo_adb.push_back(r.f64());
    const std::uint64_t n_cls = r.u64();
    for (std::uint64_t i = 0; i < n_cls; ++i) ck.pseudo_class.push_back(static_cast<int>(r.u32()));
    if (r.pos != payload.size()) throw DataError("checkpoint has trailing bytes");
    return ck;
}

gnn::HybridModel model_from_checkpoint(const Checkpoint& ckpt) {
    gnn::HybridModel model = gnn::HybridModel::init(ckpt.config.model, ckpt.in_dim, 0);
    auto named = model.named_parameters();
    if (named.size() != ckpt.weights.size())
        throw DataError("checkpoint does not match the configured model");
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& [name, stored] = ckpt.weights[i];
        if (name != named[i].first || !stored.same_shape(*named[i].second))
            throw DataError("checkpoint weight '" + name + "' does not fit the model");
        *named[i].second = stored;
    }
    return model;
}

vae::AugmentedGraph augmented_from_checkpoint(const Checkpoint& ckpt,
                                              const graph::RoadGraph& base) {
    if (ckpt.synthetic_features.rows > 0 &&
        ckpt.synthetic_features.cols != base.feature_dim())
        throw DataError("checkpoint synthetic features do not match the graph width");
    for (const auto& [s, a] : ckpt.synthetic_edges)
        if (s >= ckpt.synthetic_features.rows || a >= base.n_nodes())
            throw DataError("checkpoint synthetic edge out of range");
    if (ckpt.pseudo_adb.size() != ckpt.synthetic_features.rows ||
        ckpt.pseudo_class.size() != ckpt.synthetic_features.rows)
        throw DataError("checkpoint synthetic block is inconsistent");
    return vae::AugmentedGraph{base,
                               ckpt.synthetic_features,
                               ckpt.synthetic_edges,
                               ckpt.pseudo_adb,
                               ckpt.pseudo_class,
                               ckpt.synthetic_requested};
}

}  // namespace bikevol::io
