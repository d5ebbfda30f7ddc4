use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use issgeo::geo::{aoi_bbox, GeoPoint, MercatorContext};
use issgeo::net::{Clock, HttpResponse, HttpTransport, ManualClock, RetryPolicy, TransportError};
use issgeo::raster::RasterImage;
use issgeo::tiles::*;

/// Serves generated tiles, optionally failing the first few requests.
struct TileServer {
    tile_px: u32,
    failures: Mutex<VecDeque<u16>>,
    urls: Mutex<Vec<String>>,
}

impl TileServer {
    fn new(tile_px: u32, failures: &[u16]) -> Self {
        Self {
            tile_px,
            failures: Mutex::new(failures.iter().copied().collect()),
            urls: Mutex::new(Vec::new()),
        }
    }

    fn calls(&self) -> usize {
        self.urls.lock().unwrap().len()
    }
}

fn tile_image(z: u32, x: u32, y: u32, px: u32) -> RasterImage {
    RasterImage::from_gray_fn(px, px, |i, j| {
        ((i * 3 + j * 5 + x * 37 + y * 91 + z * 13) % 256) as u8
    })
}

impl HttpTransport for TileServer {
    fn get(&self, url: &str, _: &[(String, String)]) -> Result<HttpResponse, TransportError> {
        self.urls.lock().unwrap().push(url.to_string());
        if let Some(status) = self.failures.lock().unwrap().pop_front() {
            return Ok(HttpResponse {
                status,
                body: Vec::new(),
            });
        }
        // URLs look like mem://tiles/{z}/{x}/{y}.png?key=...
        let path = url
            .trim_start_matches("mem://tiles/")
            .split('?')
            .next()
            .unwrap();
        let parts: Vec<u32> = path
            .trim_end_matches(".png")
            .split('/')
            .map(|p| p.parse().unwrap())
            .collect();
        let img = tile_image(parts[0], parts[1], parts[2], self.tile_px);
        Ok(HttpResponse {
            status: 200,
            body: img.encode_png().unwrap(),
        })
    }

    fn post(
        &self,
        url: &str,
        _: &[(String, String)],
        _: &[u8],
    ) -> Result<HttpResponse, TransportError> {
        Err(TransportError::Connection(format!("unexpected POST {url}")))
    }
}

fn config(cache: Option<&Path>) -> ProviderConfig {
    ProviderConfig {
        endpoint_template: "mem://tiles/{z}/{x}/{y}.png?key={key}".into(),
        api_key: Some("secret".into()),
        tile_px: 256,
        rate_limit: 0.0,
        cache_dir: cache.map(Path::to_path_buf),
        retry: RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        },
        ..ProviderConfig::default()
    }
}

fn small_grid() -> TileGrid {
    let ctx = MercatorContext::new(4.0, 256).unwrap();
    let aoi = aoi_bbox(GeoPoint::new(10.0, 20.0).unwrap(), &ctx, 300.0, 300.0).unwrap();
    tiles_for_bbox(&aoi, 4).unwrap()
}

#[test]
fn downloads_then_serves_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let server = TileServer::new(256, &[]);
    let clock = ManualClock::default();
    let grid = small_grid();
    let fetcher = TileFetcher::new(config(Some(dir.path())), &server, &clock).unwrap();
    let first = fetcher.fetch_tiles(&grid).unwrap();
    assert_eq!(server.calls(), grid.len());
    assert!(server
        .urls
        .lock()
        .unwrap()
        .iter()
        .all(|u| u.ends_with("?key=secret")));

    let again = TileFetcher::new(config(Some(dir.path())), &server, &clock).unwrap();
    let second = again.fetch_tiles(&grid).unwrap();
    assert_eq!(
        server.calls(),
        grid.len(),
        "cache hits must not reach the network"
    );
    assert_eq!(again.requests(), 0);
    assert_eq!(first, second);

    // Cache layout: <cache>/<16 hex chars>/{z}/{x}/{y}.png
    let roots: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(roots.len(), 1);
    let name = roots[0].file_name().unwrap().to_str().unwrap().to_string();
    assert_eq!(name.len(), 16);
    assert!(name.bytes().all(|b| b.is_ascii_hexdigit()));
    let t = grid.tiles()[0];
    assert!(roots[0]
        .join(t.z.to_string())
        .join(t.x.to_string())
        .join(format!("{}.png", t.y))
        .exists());
}

#[test]
fn offline_uses_fixtures_and_never_the_network() {
    let fixtures = tempfile::tempdir().unwrap();
    let grid = small_grid();
    for t in grid.tiles() {
        let p = fixtures
            .path()
            .join(t.z.to_string())
            .join(t.x.to_string())
            .join(format!("{}.png", t.y));
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(
            &p,
            tile_image(u32::from(t.z), t.x, t.y, 256)
                .encode_png()
                .unwrap(),
        )
        .unwrap();
    }
    let server = TileServer::new(256, &[]);
    let clock = ManualClock::default();
    let mut cfg = config(None);
    cfg.offline = true;
    cfg.fixture_dir = Some(fixtures.path().to_path_buf());
    let fetcher = TileFetcher::new(cfg.clone(), &server, &clock).unwrap();
    let tiles = fetcher.fetch_tiles(&grid).unwrap();
    assert_eq!(tiles.len(), grid.len());
    assert_eq!(server.calls(), 0);

    cfg.fixture_dir = None;
    let fetcher = TileFetcher::new(cfg, &server, &clock).unwrap();
    assert!(matches!(
        fetcher.fetch_tiles(&grid),
        Err(TileError::OfflineMiss(_))
    ));
    assert_eq!(server.calls(), 0);
}

#[test]
fn transient_failures_are_retried_with_backoff() {
    let server = TileServer::new(256, &[503, 429]);
    let clock = ManualClock::default();
    let fetcher = TileFetcher::new(config(None), &server, &clock).unwrap();
    let grid = TileGrid {
        z: 1,
        x_min: 0,
        y_min: 0,
        cols: 1,
        rows: 1,
        aoi_origin_tiles: (0.0, 0.0),
        aoi_size_tiles: (1.0, 1.0),
    };
    fetcher.fetch_tiles(&grid).unwrap();
    assert_eq!(server.calls(), 3);
    assert_eq!(clock.now(), Duration::from_millis(500 + 1000));
}

#[test]
fn retries_give_up_after_three_attempts() {
    let server = TileServer::new(256, &[500, 502, 503, 504]);
    let clock = ManualClock::default();
    let fetcher = TileFetcher::new(config(None), &server, &clock).unwrap();
    let grid = TileGrid {
        z: 1,
        x_min: 1,
        y_min: 1,
        cols: 1,
        rows: 1,
        aoi_origin_tiles: (0.0, 0.0),
        aoi_size_tiles: (1.0, 1.0),
    };
    match fetcher.fetch_tiles(&grid) {
        Err(TileError::NetworkError { reason, .. }) => {
            assert!(reason.contains("3 attempts"), "{reason}")
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(server.calls(), 3);
}

#[test]
fn permanent_failure_is_not_retried() {
    let server = TileServer::new(256, &[404]);
    let clock = ManualClock::default();
    let fetcher = TileFetcher::new(config(None), &server, &clock).unwrap();
    let grid = TileGrid {
        z: 0,
        x_min: 0,
        y_min: 0,
        cols: 1,
        rows: 1,
        aoi_origin_tiles: (0.0, 0.0),
        aoi_size_tiles: (1.0, 1.0),
    };
    assert!(matches!(
        fetcher.fetch_tiles(&grid),
        Err(TileError::NetworkError { .. })
    ));
    assert_eq!(server.calls(), 1);
}

#[test]
fn rate_limit_spaces_requests() {
    let server = TileServer::new(256, &[]);
    let clock = ManualClock::default();
    let mut cfg = config(None);
    cfg.rate_limit = 4.0;
    let fetcher = TileFetcher::new(cfg, &server, &clock).unwrap();
    let grid = TileGrid {
        z: 3,
        x_min: 0,
        y_min: 0,
        cols: 4,
        rows: 2,
        aoi_origin_tiles: (0.0, 0.0),
        aoi_size_tiles: (4.0, 2.0),
    };
    fetcher.fetch_tiles(&grid).unwrap();
    assert_eq!(server.calls(), 8);
    assert_eq!(clock.now(), Duration::from_millis(7 * 250));
}

#[test]
fn parallel_fetch_matches_sequential() {
    let server = TileServer::new(256, &[]);
    let clock = ManualClock::default();
    let grid = small_grid();
    let seq = TileFetcher::new(config(None), &server, &clock)
        .unwrap()
        .fetch_tiles(&grid)
        .unwrap();
    let mut cfg = config(None);
    cfg.jobs = 4;
    let par = TileFetcher::new(cfg, &server, &clock)
        .unwrap()
        .fetch_tiles(&grid)
        .unwrap();
    assert_eq!(seq, par);
}

#[test]
fn wrong_tile_size_is_rejected() {
    let server = TileServer::new(128, &[]);
    let clock = ManualClock::default();
    let fetcher = TileFetcher::new(config(None), &server, &clock).unwrap();
    let grid = TileGrid {
        z: 0,
        x_min: 0,
        y_min: 0,
        cols: 1,
        rows: 1,
        aoi_origin_tiles: (0.0, 0.0),
        aoi_size_tiles: (1.0, 1.0),
    };
    assert!(matches!(
        fetcher.fetch_tiles(&grid),
        Err(TileError::InconsistentTileSize { .. })
    ));
}

#[test]
fn fractional_zoom_mosaic_has_aoi_size() {
    let server = TileServer::new(256, &[]);
    let clock = ManualClock::default();
    let fetcher = TileFetcher::new(config(None), &server, &clock).unwrap();
    let ctx = MercatorContext::new(5.3, 256).unwrap();
    let aoi = aoi_bbox(GeoPoint::new(-33.9, 151.2).unwrap(), &ctx, 400.0, 300.0).unwrap();
    let img = build_mosaic(&aoi, &fetcher).unwrap();
    assert_eq!((img.width(), img.height()), (400, 300));
    assert_eq!(mosaic_zoom(&aoi, 256).unwrap(), 6);
}

#[test]
fn static_requests_use_their_own_cache_layout() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::default();
    let png = RasterImage::from_gray_fn(64, 48, |x, y| (x ^ y) as u8)
        .encode_png()
        .unwrap();
    struct Fixed(Vec<u8>, Mutex<usize>);
    impl HttpTransport for Fixed {
        fn get(&self, _: &str, _: &[(String, String)]) -> Result<HttpResponse, TransportError> {
            *self.1.lock().unwrap() += 1;
            Ok(HttpResponse {
                status: 200,
                body: self.0.clone(),
            })
        }
        fn post(
            &self,
            _: &str,
            _: &[(String, String)],
            _: &[u8],
        ) -> Result<HttpResponse, TransportError> {
            unreachable!()
        }
    }
    let server = Fixed(png, Mutex::new(0));
    let cfg = ProviderConfig {
        endpoint_template: "mem://static?c={lat},{lon}&z={zoom}&s={width}x{height}".into(),
        cache_dir: Some(dir.path().to_path_buf()),
        rate_limit: 0.0,
        ..ProviderConfig::default()
    };
    let fetcher = TileFetcher::new(cfg.clone(), &server, &clock).unwrap();
    let req = StaticRequest {
        lat: 30.123456,
        lon: -2.5,
        zoom: 9.5,
        width: 64,
        height: 48,
    };
    let img = fetcher.fetch_static(&req).unwrap();
    assert_eq!((img.width(), img.height()), (64, 48));
    let root = std::fs::read_dir(dir.path())
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    assert!(root.join("static/30.12346_-2.50000_9.5_64x48.png").exists());
    TileFetcher::new(cfg, &server, &clock)
        .unwrap()
        .fetch_static(&req)
        .unwrap();
    assert_eq!(*server.1.lock().unwrap(), 1);
}
