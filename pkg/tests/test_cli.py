"""CLI behaviour: exit codes, output, and file emission."""

import json

import pytest

from atmsim.cell import Cell, CellHeader, InterfaceKind, encode_header, format_trace_line
from atmsim.cli import main


def write_scenario(tmp_path, raw: dict, name="scenario.json") -> str:
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def small_scenario() -> dict:
    return {
        "duration_s": 0.5,
        "seed": 2,
        "nodes": [
            {"name": "a", "kind": "host"},
            {"name": "s", "kind": "switch"},
            {"name": "b", "kind": "host"},
        ],
        "links": [
            {"a": "a", "b": "s", "bit_rate": 1e6, "propagation_delay": 0.001},
            {"a": "s", "b": "b", "bit_rate": 1e6, "propagation_delay": 0.001},
        ],
        "generators": [{"id": "g", "kind": "paced_cbr", "rate": 200.0}],
        "connections": [
            {
                "id": "c1",
                "category": "CBR",
                "route": ["a", "s", "b"],
                "generator": "g",
                "descriptor": {"pcr": 200.0, "cdvt": 0.001},
            }
        ],
    }


def trace_cell(vci=32, clp=0) -> Cell:
    header = CellHeader(kind=InterfaceKind.UNI, vpi=0, vci=vci, clp=clp)
    return Cell(header, bytes(48))


def write_trace(tmp_path, lines, name="trace.txt") -> str:
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n")
    return str(path)


class TestHec:
    def test_compute_appends_checksum(self, capsys):
        assert main(["hec", "00000000"]) == 0
        assert capsys.readouterr().out.strip() == "0000000055"

    def test_compute_known_header(self, capsys):
        assert main(["hec", "00100010"]) == 0
        assert capsys.readouterr().out.strip() == "0010001087"

    def test_check_valid(self, capsys):
        assert main(["hec", "0010001087"]) == 0
        assert capsys.readouterr().out.strip() == "valid"

    def test_check_corrects_single_bit(self, capsys):
        corrupted = bytearray(bytes.fromhex("0010001087"))
        corrupted[1] ^= 0x40
        assert main(["hec", corrupted.hex()]) == 0
        out = capsys.readouterr().out.strip()
        assert out.startswith("corrected bit ")
        assert out.endswith("0010001087")

    def test_check_double_flip_uncorrectable(self, capsys):
        corrupted = bytearray(bytes.fromhex("0010001087"))
        corrupted[0] ^= 0x01
        corrupted[3] ^= 0x80
        assert main(["hec", corrupted.hex()]) == 1
        assert capsys.readouterr().out.strip() == "uncorrectable"

    def test_colon_separated_hex_accepted(self, capsys):
        assert main(["hec", "00:10:00:10"]) == 0
        assert capsys.readouterr().out.strip() == "0010001087"

    def test_bad_hex_is_usage_error(self):
        assert main(["hec", "zz"]) == 2

    def test_wrong_length_is_usage_error(self):
        assert main(["hec", "001000"]) == 2


class TestValidate:
    def test_good_scenario_ok(self, tmp_path, capsys):
        path = write_scenario(tmp_path, small_scenario())
        assert main(["validate", path]) == 0
        assert capsys.readouterr().out.strip() == "OK"

    def test_missing_file_usage_error(self, tmp_path):
        assert main(["validate", str(tmp_path / "nope.json")]) == 2

    def test_semantic_violation_fails(self, tmp_path, capsys):
        raw = small_scenario()
        raw["duration_s"] = -1.0
        path = write_scenario(tmp_path, raw)
        assert main(["validate", path]) == 1
        assert "duration_s" in capsys.readouterr().out

    def test_schema_error_fails(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{oops")
        assert main(["validate", str(path)]) == 1

    def test_admission_failure_reported(self, tmp_path, capsys):
        raw = small_scenario()
        raw["generators"][0]["rate"] = 1500.0
        raw["connections"][0]["descriptor"]["pcr"] = 1500.0
        raw["generators"].append({"id": "g2", "kind": "paced_cbr", "rate": 1500.0})
        raw["connections"].append(
            {
                "id": "c2",
                "category": "CBR",
                "route": ["a", "s", "b"],
                "generator": "g2",
                "descriptor": {"pcr": 1500.0, "cdvt": 0.001},
            }
        )
        path = write_scenario(tmp_path, raw)
        assert main(["validate", path]) == 1
        assert "rejected by admission control" in capsys.readouterr().out


class TestRun:
    def test_run_prints_summary(self, tmp_path, capsys):
        path = write_scenario(tmp_path, small_scenario())
        assert main(["run", path]) == 0
        out = capsys.readouterr().out
        assert "conn c1 [CBR]:" in out
        assert "switch s:" in out
        assert "link a->s:" in out
        assert "delay: mean" in out

    def test_run_missing_file(self, tmp_path):
        assert main(["run", str(tmp_path / "gone.json")]) == 2

    def test_run_invalid_scenario(self, tmp_path, capsys):
        raw = small_scenario()
        raw["duration_s"] = -1.0
        path = write_scenario(tmp_path, raw)
        assert main(["run", path]) == 1

    def test_run_writes_report(self, tmp_path, capsys):
        path = write_scenario(tmp_path, small_scenario())
        out_dir = tmp_path / "results"
        assert main(["run", path, "--out", str(out_dir)]) == 0
        report = json.loads((out_dir / "report.json").read_text())
        assert report["connections"]["c1"]["delivered"] > 0
        assert f"wrote {out_dir / 'report.json'}" in capsys.readouterr().out

    def test_run_writes_abr_csv(self, tmp_path, capsys):
        raw = small_scenario()
        raw["duration_s"] = 2.0
        raw["nodes"][1]["efci_threshold"] = 16
        raw["links"][0]["bit_rate"] = 4e6
        raw["generators"] = [{"id": "g", "kind": "greedy_abr"}]
        raw["connections"] = [
            {
                "id": "flow",
                "category": "ABR",
                "route": ["a", "s", "b"],
                "generator": "g",
                "descriptor": {"pcr": 2e6 / 424, "mcr": 0.0},
            }
        ]
        path = write_scenario(tmp_path, raw)
        out_dir = tmp_path / "results"
        assert main(["run", path, "--out", str(out_dir)]) == 0
        csv_text = (out_dir / "abr_flow.csv").read_text()
        lines = csv_text.splitlines()
        assert lines[0] == "time_s,acr,congested"
        assert len(lines) > 1
        out = capsys.readouterr().out
        assert "abr: final_acr" in out


class TestConformance:
    def conforming_trace(self, tmp_path, pcr=1024.0, count=8):
        # Period 1/1024 s is an exact binary float, so timestamps written
        # with repr() survive the round trip and match the contract exactly.
        period = 1.0 / pcr
        lines = [
            format_trace_line(i * period, 1, trace_cell()) for i in range(count)
        ]
        return write_trace(tmp_path, lines)

    def test_conforming_trace_passes(self, tmp_path, capsys):
        path = self.conforming_trace(tmp_path)
        assert main(["conformance", path, "--pcr", "1024"]) == 0
        out = capsys.readouterr().out
        assert "cells: 8" in out
        assert "conforming: 8" in out
        assert "nonconforming: 0" in out

    def test_burst_fails_and_lists_violations(self, tmp_path, capsys):
        lines = [format_trace_line(0.0, 1, trace_cell()) for _ in range(3)]
        path = write_trace(tmp_path, lines)
        assert main(["conformance", path, "--pcr", "1024"]) == 1
        out = capsys.readouterr().out
        assert "nonconforming: 2" in out
        assert "dropped: 2" in out
        assert "first violations:" in out
        assert "line 2:" in out

    def test_tag_action_reports_tagged(self, tmp_path, capsys):
        lines = [format_trace_line(0.0, 1, trace_cell()) for _ in range(2)]
        path = write_trace(tmp_path, lines)
        assert main(["conformance", path, "--pcr", "1024", "--action", "tag"]) == 1
        out = capsys.readouterr().out
        assert "tagged: 1" in out

    def test_port_filter(self, tmp_path, capsys):
        lines = [
            format_trace_line(0.0, 1, trace_cell()),
            format_trace_line(0.0, 2, trace_cell()),
        ]
        path = write_trace(tmp_path, lines)
        assert main(["conformance", path, "--pcr", "1024", "--port", "1"]) == 0
        assert "cells: 1" in capsys.readouterr().out

    def test_scr_requires_mbs(self, tmp_path):
        path = self.conforming_trace(tmp_path)
        assert main(["conformance", path, "--pcr", "1024", "--scr", "512"]) == 2

    def test_dual_bucket_accepts_declared_burst(self, tmp_path, capsys):
        # Back-to-back at PCR up to MBS cells is conforming for the
        # sustainable bucket when tau equals the burst tolerance.
        pcr, scr, mbs = 1024.0, 512.0, 4
        period = 1.0 / pcr
        lines = [
            format_trace_line(i * period, 1, trace_cell()) for i in range(mbs)
        ]
        path = write_trace(tmp_path, lines)
        rc = main(
            [
                "conformance",
                path,
                "--pcr",
                "1024",
                "--scr",
                "512",
                "--mbs",
                "4",
            ]
        )
        assert rc == 0
        assert "conforming: 4" in capsys.readouterr().out

    def test_malformed_line_is_usage_error(self, tmp_path, capsys):
        path = write_trace(tmp_path, ["0.0 1 deadbeef", "not a line"])
        assert main(["conformance", path, "--pcr", "1024"]) == 2
        err = capsys.readouterr().err
        assert f"{path}:1:" in err or f"{path}:2:" in err

    def test_time_regression_is_usage_error(self, tmp_path, capsys):
        lines = [
            format_trace_line(0.5, 1, trace_cell()),
            format_trace_line(0.25, 1, trace_cell()),
        ]
        path = write_trace(tmp_path, lines)
        assert main(["conformance", path, "--pcr", "1024"]) == 2
        assert "non-decreasing" in capsys.readouterr().err

    def test_corrupted_header_corrected_and_counted(self, tmp_path, capsys):
        cell = trace_cell()
        raw = bytearray(encode_header(cell.header) + cell.payload)
        raw[0] ^= 0x04
        line = f"{0.0!r} 1 {bytes(raw).hex()}"
        path = write_trace(tmp_path, [line])
        assert main(["conformance", path, "--pcr", "1024"]) == 0
        out = capsys.readouterr().out
        assert "corrected_headers: 1" in out
        assert "cells: 1" in out

    def test_uncorrectable_header_skipped(self, tmp_path, capsys):
        cell = trace_cell()
        raw = bytearray(encode_header(cell.header) + cell.payload)
        raw[0] ^= 0x05
        line = f"{0.0!r} 1 {bytes(raw).hex()}"
        path = write_trace(tmp_path, [line])
        assert main(["conformance", path, "--pcr", "1024"]) == 0
        out = capsys.readouterr().out
        assert "uncorrectable_headers: 1" in out
        assert "cells: 0" in out

    def test_missing_trace_usage_error(self, tmp_path):
        assert main(["conformance", str(tmp_path / "no.txt"), "--pcr", "10"]) == 2

    def test_blank_lines_ignored(self, tmp_path, capsys):
        path = write_trace(tmp_path, [format_trace_line(0.0, 1, trace_cell()), ""])
        assert main(["conformance", path, "--pcr", "1024"]) == 0
        assert "cells: 1" in capsys.readouterr().out
