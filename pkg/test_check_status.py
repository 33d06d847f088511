#!/usr/bin/env python3
"""
Tests for the setup status script.
"""

import os

import check_status


def test_shipped_fixtures_pass_status_check(capsys):
    assert check_status.check_fixtures()
    out = capsys.readouterr().out
    assert '✅ abs_fixture.json (nonsmooth_p' in out
    assert '✅ paper_example.json (bilevel' in out


def test_environment_without_env_file(monkeypatch, tmp_path, capsys):
    monkeypatch.chdir(tmp_path)
    assert check_status.check_environment()
    assert 'No .env file' in capsys.readouterr().out


def test_invalid_env_file_is_reported(monkeypatch, tmp_path, capsys):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv('NSOPT_SAMPLES', raising=False)
    (tmp_path / '.env').write_text('NSOPT_SAMPLES=0\n', encoding='utf-8')
    try:
        assert not check_status.check_environment()
    finally:
        # load_dotenv exported the value into the process environment
        os.environ.pop('NSOPT_SAMPLES', None)
    assert 'Invalid .env' in capsys.readouterr().out
