#!/usr/bin/env python3
"""
gatdet CLI 실행 래퍼 스크립트
설치 없이 저장소에서 바로 실행할 때 경로 설정을 처리합니다.
"""

import os
import sys
from pathlib import Path

# 프로젝트 루트 디렉토리 설정
PROJECT_ROOT = Path(__file__).parent.parent.absolute()
SRC_DIR = PROJECT_ROOT / "src"

sys.path.insert(0, str(SRC_DIR))

# 상대 경로 (configs/, cache/) 기준을 프로젝트 루트로
os.chdir(PROJECT_ROOT)

if __name__ == "__main__":
    from gatdet_cli import main

    sys.exit(main())
