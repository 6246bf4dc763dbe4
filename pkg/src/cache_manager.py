#!/usr/bin/env python3
"""
Cache Manager for gatdet
SQLite 기반 전처리 결과(다운샘플 점 + 그래프 간선) 캐시
"""

import hashlib
import json
import logging
import os
import sqlite3
from datetime import datetime, timedelta
from typing import Any, Dict, Optional, Tuple

import numpy as np

logger = logging.getLogger("gatdet-cache")

DEFAULT_DB_PATH = "cache/gatdet_cache.db"


class CacheManager:
    """SQLite 기반 캐싱 매니저"""

    def __init__(self, db_path: str = DEFAULT_DB_PATH):
        self.db_path = db_path
        self._ensure_cache_dir()
        self._init_db()

    def _ensure_cache_dir(self):
        """캐시 디렉터리 생성"""
        cache_dir = os.path.dirname(self.db_path)
        if cache_dir and not os.path.exists(cache_dir):
            os.makedirs(cache_dir)

    def _init_db(self):
        """데이터베이스 초기화"""
        with sqlite3.connect(self.db_path) as conn:
            conn.execute('''
                CREATE TABLE IF NOT EXISTS cache_entries (
                    key TEXT PRIMARY KEY,
                    data TEXT NOT NULL,
                    created_at TIMESTAMP NOT NULL,
                    expires_at TIMESTAMP NOT NULL,
                    category TEXT NOT NULL,
                    metadata TEXT
                )
            ''')
            conn.execute('CREATE INDEX IF NOT EXISTS idx_expires_at ON cache_entries(expires_at)')
            conn.execute('CREATE INDEX IF NOT EXISTS idx_category ON cache_entries(category)')
            conn.commit()

    def _generate_key(self, category: str, **params) -> str:
        """캐시 키 생성 (정렬된 JSON 파라미터의 md5)"""
        param_str = json.dumps(params, sort_keys=True, ensure_ascii=False)
        return hashlib.md5(f"{category}:{param_str}".encode('utf-8')).hexdigest()

    def get(self, category: str, **params) -> Optional[Dict[str, Any]]:
        """캐시에서 데이터 조회"""
        key = self._generate_key(category, **params)
        with sqlite3.connect(self.db_path) as conn:
            conn.row_factory = sqlite3.Row
            row = conn.execute(
                'SELECT data FROM cache_entries WHERE key = ? AND expires_at > ?',
                (key, datetime.now().isoformat())).fetchone()
        if row:
            logger.debug(f"Cache hit for {category}: {key[:8]}...")
            return json.loads(row['data'])
        logger.debug(f"Cache miss for {category}: {key[:8]}...")
        return None

    def set(self, category: str, data: Dict[str, Any], ttl_hours: float = 24, **params):
        """캐시에 데이터 저장"""
        key = self._generate_key(category, **params)
        created_at = datetime.now()
        expires_at = created_at + timedelta(hours=ttl_hours)
        payload = json.dumps(data)
        metadata = {'params': params, 'data_size': len(payload)}
        with sqlite3.connect(self.db_path) as conn:
            conn.execute('''
                INSERT OR REPLACE INTO cache_entries
                (key, data, created_at, expires_at, category, metadata)
                VALUES (?, ?, ?, ?, ?, ?)
            ''', (key, payload, created_at.isoformat(), expires_at.isoformat(), category,
                  json.dumps(metadata, ensure_ascii=False)))
            conn.commit()
        logger.debug(f"Cached {category} data: {key[:8]}... (TTL: {ttl_hours}h)")

    def delete(self, category: str, **params) -> bool:
        """특정 캐시 항목 삭제"""
        key = self._generate_key(category, **params)
        with sqlite3.connect(self.db_path) as conn:
            deleted = conn.execute('DELETE FROM cache_entries WHERE key = ?', (key,)).rowcount > 0
            conn.commit()
        if deleted:
            logger.info(f"Deleted cache entry: {key[:8]}...")
        return deleted

    def clear_category(self, category: str) -> int:
        """특정 카테고리의 모든 캐시 삭제"""
        with sqlite3.connect(self.db_path) as conn:
            deleted_count = conn.execute('DELETE FROM cache_entries WHERE category = ?', (category,)).rowcount
            conn.commit()
        logger.info(f"Cleared {deleted_count} entries from category: {category}")
        return deleted_count

    def cleanup_expired(self) -> int:
        """만료된 캐시 항목 정리"""
        with sqlite3.connect(self.db_path) as conn:
            deleted_count = conn.execute('DELETE FROM cache_entries WHERE expires_at <= ?',
                                         (datetime.now().isoformat(),)).rowcount
            conn.commit()
        if deleted_count > 0:
            logger.info(f"Cleaned up {deleted_count} expired cache entries")
        return deleted_count

    def get_stats(self) -> Dict[str, Any]:
        """캐시 통계 조회"""
        now = datetime.now().isoformat()
        with sqlite3.connect(self.db_path) as conn:
            conn.row_factory = sqlite3.Row
            total = conn.execute('SELECT COUNT(*) AS total FROM cache_entries').fetchone()['total']
            expired = conn.execute('SELECT COUNT(*) AS expired FROM cache_entries WHERE expires_at <= ?',
                                   (now,)).fetchone()['expired']
            categories = {}
            for row in conn.execute('''
                SELECT category, COUNT(*) AS count,
                       AVG(CASE WHEN expires_at > ? THEN 1 ELSE 0 END) AS active_ratio
                FROM cache_entries GROUP BY category
            ''', (now,)).fetchall():
                categories[row['category']] = {'count': row['count'], 'active_ratio': row['active_ratio']}
        return {
            'total_entries': total,
            'expired_entries': expired,
            'active_entries': total - expired,
            'categories': categories,
        }

    def get_cache_policy(self, category: str) -> Dict[str, float]:
        """카테고리별 캐시 정책 반환"""
        policies = {
            'preprocessed_scene': {'ttl_hours': 168},  # 1주일 (입력이 같으면 결과도 같음)
            'default': {'ttl_hours': 24},
        }
        return policies.get(category, policies['default'])


_default_cache: Optional[CacheManager] = None


def default_cache() -> CacheManager:
    """GATDET_CACHE_DB 경로의 전역 캐시 매니저 (첫 호출 시 생성)"""
    global _default_cache
    if _default_cache is None:
        _default_cache = CacheManager(os.getenv("GATDET_CACHE_DB", DEFAULT_DB_PATH))
    return _default_cache


def preprocessing_key(fingerprint: str, bands: str, radius: float, max_neighbors: Optional[int],
                      frustum: Optional[Tuple[int, int]] = None) -> Dict[str, Any]:
    return {
        'fingerprint': fingerprint,
        'bands': bands,
        'radius': radius,
        'max_neighbors': max_neighbors,
        'frustum': list(frustum) if frustum else None,
    }


def cached_preprocessing(cache: Optional[CacheManager], key: Dict[str, Any], compute):
    """전처리 결과를 캐싱; 캐시 실패는 로그만 남기고 재계산"""
    if cache is not None:
        try:
            hit = cache.get('preprocessed_scene', **key)
            if hit is not None:
                return (np.array(hit['points'], dtype=np.float64).reshape(-1, 4),
                        np.array(hit['edges_u'], dtype=np.int64),
                        np.array(hit['edges_v'], dtype=np.int64))
        except (sqlite3.Error, ValueError, KeyError) as e:
            logger.warning(f"cache read failed, recomputing: {e}")

    points, edges_u, edges_v = compute()

    if cache is not None:
        try:
            policy = cache.get_cache_policy('preprocessed_scene')
            cache.set('preprocessed_scene',
                      {'points': points.tolist(), 'edges_u': edges_u.tolist(), 'edges_v': edges_v.tolist()},
                      policy['ttl_hours'], **key)
        except (sqlite3.Error, ValueError, OSError) as e:
            logger.warning(f"cache write failed: {e}")
    return points, edges_u, edges_v
