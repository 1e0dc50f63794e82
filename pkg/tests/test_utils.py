#!/usr/bin/env python3
"""
Test run directory, config snapshot, history and logging utilities.
"""

import os
import shutil
import tempfile

from evocompress.utils import (
    append_history,
    check_run_status,
    config_hash,
    individual_dir,
    log_message,
    read_history,
    read_json,
    read_run_config,
    read_run_log,
    setup_run_directory,
    truncate_history,
    write_json,
    write_run_config,
)


def test_run_directory():
    """Test run directory setup."""
    print("Testing run directory setup...")

    temp_dir = tempfile.mkdtemp()

    try:
        run_dir = setup_run_directory(os.path.join(temp_dir, 'test_run'))

        assert os.path.isabs(run_dir)
        for sub in ('individuals', 'cache', 'archive', 'reports'):
            assert os.path.isdir(os.path.join(run_dir, sub))
        assert individual_dir(run_dir, 7).endswith(os.path.join('individuals', '00007'))

        print(f"  Created: {run_dir}")
        print("✓ Run directory tests passed!\n")

    finally:
        shutil.rmtree(temp_dir)


def test_config_write_read():
    """Test config snapshot writing and reading."""
    print("Testing config snapshot...")

    temp_dir = tempfile.mkdtemp()

    try:
        run_dir = setup_run_directory(os.path.join(temp_dir, 'test_run'))
        config = {'evolution': {'seed': 42, 'population_size': 8}, 'objectives': ['quality', 'size']}

        path = write_run_config(run_dir, config)
        snapshot = read_run_config(run_dir)

        assert os.path.exists(path)
        assert snapshot['config'] == config
        assert snapshot['config_hash'] == config_hash(config)
        assert 'created' in snapshot

        print("✓ Config tests passed!\n")

    finally:
        shutil.rmtree(temp_dir)


def test_config_hash_ignores_key_order():
    """Test that the config hash is order independent and value sensitive."""
    assert config_hash({'a': 1, 'b': [1, 2]}) == config_hash({'b': [1, 2], 'a': 1})
    assert config_hash({'a': 1}) != config_hash({'a': 2})


def test_json_helpers():
    """Test atomic JSON writes into missing folders."""
    temp_dir = tempfile.mkdtemp()

    try:
        path = write_json(os.path.join(temp_dir, 'nested', 'state.json'), {'generation': 3})

        assert read_json(path) == {'generation': 3}
        assert not os.path.exists(path + '.tmp')
        assert read_json(os.path.join(temp_dir, 'absent.json')) is None

    finally:
        shutil.rmtree(temp_dir)


def test_logging():
    """Test logging functionality."""
    print("Testing logging functionality...")

    temp_dir = tempfile.mkdtemp()

    try:
        run_dir = setup_run_directory(os.path.join(temp_dir, 'test_run'))

        log_message(run_dir, "Generation 0: evaluating 9 individual(s)")
        log_message(run_dir, "Generation 0: archive 3", level='SUCCESS')
        log_message(run_dir, "No valid mutation of individual 4; skipped", level='WARNING')
        log_message(run_dir, "Individual 5 failed", level='ERROR')

        log_content = read_run_log(run_dir)

        assert log_content is not None
        assert "Run created" in log_content
        assert "Generation 0: evaluating" in log_content
        assert "[SUCCESS]" in log_content
        assert "[WARNING]" in log_content
        assert "[ERROR]" in log_content

        print("✓ Logging tests passed!\n")

    finally:
        shutil.rmtree(temp_dir)


def test_history_truncation():
    """Test that resume drops history records past the last barrier."""
    temp_dir = tempfile.mkdtemp()

    try:
        run_dir = setup_run_directory(os.path.join(temp_dir, 'test_run'))
        for g in range(4):
            append_history(run_dir, {'generation': g, 'hypervolume': float(g)})

        truncate_history(run_dir, 2)

        assert [r['generation'] for r in read_history(run_dir)] == [0, 1]

    finally:
        shutil.rmtree(temp_dir)


def test_run_status():
    """Test run status checking."""
    print("Testing run status checking...")

    temp_dir = tempfile.mkdtemp()

    try:
        run_dir = setup_run_directory(os.path.join(temp_dir, 'test_run'))

        status = check_run_status(run_dir)

        assert status['exists'] == True
        assert status['has_config'] == False
        assert status['has_log'] == True  # Created by setup_run_directory
        assert status['has_state'] == False
        assert status['has_archive'] == False
        assert status['individuals'] == 0

        write_run_config(run_dir, {'seed': 1})
        write_json(os.path.join(run_dir, 'state.json'), {'generation': 2, 'finished': True})
        write_json(os.path.join(run_dir, 'archive', 'manifest.json'), {'members': []})
        os.makedirs(individual_dir(run_dir, 0))
        with open(os.path.join(run_dir, 'reports', 'report.md'), 'w') as f:
            f.write("| Pipeline |\n")

        status = check_run_status(run_dir)

        assert status['has_config'] == True
        assert status['config']['config'] == {'seed': 1}
        assert status['has_state'] == True
        assert status['generation'] == 2
        assert status['finished'] == True
        assert status['has_archive'] == True
        assert status['has_reports'] == True
        assert status['individuals'] == 1

        print("✓ Run status tests passed!\n")

    finally:
        shutil.rmtree(temp_dir)


def test_nonexistent_run():
    """Test status checking for a non-existent run."""
    status = check_run_status('/path/that/does/not/exist')

    assert status['exists'] == False
    assert status['has_config'] == False
    assert status['has_log'] == False
    assert status['has_state'] == False
    assert status['config'] is None


if __name__ == '__main__':
    print("\n" + "=" * 70)
    print("Run Directory Tests")
    print("=" * 70 + "\n")

    test_run_directory()
    test_config_write_read()
    test_logging()
    test_run_status()

    print("=" * 70)
    print("All tests passed! ✓")
    print("=" * 70 + "\n")
