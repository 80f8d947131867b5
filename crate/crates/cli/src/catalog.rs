use crate::config::ServiceConfig;
use anyhow::Context;
use nl2sql_core::embedding::EmbeddingProvider;
use nl2sql_core::index::{build_index, index_fingerprint};
use nl2sql_core::orchestrator::{Catalog, DatabaseBundle};
use nl2sql_core::schema::{
    introspect_schema, render_column_document, DatabaseHandle, DatabaseSchema, DescriptionOverlay,
};
use nl2sql_core::synthetic::OVERLAY_FILE;
use nl2sql_core::train::load_head;
use nl2sql_core::{Head, Index};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Everything the subcommands share: the databases, their schemas and the
/// embedding stack.
pub struct Workspace {
    pub cfg: ServiceConfig,
    pub handles: Vec<DatabaseHandle>,
    pub provider: Box<dyn EmbeddingProvider>,
    pub head: Option<Head>,
}

/// `<dir>/descriptions.json` next to a database in its own directory, or
/// `<db_id>.descriptions.json` beside a flat database file.
pub fn overlay_path(h: &DatabaseHandle) -> PathBuf {
    let dir = h.path.parent().unwrap_or(Path::new("."));
    if dir.file_name().and_then(|n| n.to_str()) == Some(h.db_id.as_str()) {
        dir.join(OVERLAY_FILE)
    } else {
        dir.join(format!("{}.{OVERLAY_FILE}", h.db_id))
    }
}

pub fn load_overlay(h: &DatabaseHandle) -> anyhow::Result<Option<DescriptionOverlay>> {
    let path = overlay_path(h);
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(DescriptionOverlay::load(&path)?))
}

pub fn index_path(cfg: &ServiceConfig, db_id: &str) -> PathBuf {
    cfg.index_dir.join(format!("{db_id}.idx"))
}

/// Whether `idx` was built for `schema` with the expected model and head.
pub fn index_is_current(idx: &Index, schema: &DatabaseSchema, fingerprint: &str) -> bool {
    idx.fingerprint() == fingerprint
        && idx.db_id() == schema.db_id
        && idx.len() == schema.columns.len()
        && idx
            .entries()
            .iter()
            .zip(&schema.columns)
            .all(|(e, c)| e.document == render_column_document(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexStatus {
    Written,
    Unchanged,
}

impl Workspace {
    pub fn open(cfg: ServiceConfig) -> anyhow::Result<Self> {
        cfg.validate()?;
        let handles = DatabaseHandle::discover(&cfg.db_dir)
            .with_context(|| format!("scanning {}", cfg.db_dir.display()))?;
        let provider = cfg.embedding.build()?;
        let head = cfg
            .head
            .as_ref()
            .map(|p| load_head::<f64>(p).with_context(|| format!("loading head {}", p.display())))
            .transpose()?;
        Ok(Self {
            cfg,
            handles,
            provider,
            head,
        })
    }

    pub fn handle(&self, db_id: &str) -> anyhow::Result<&DatabaseHandle> {
        self.handles
            .iter()
            .find(|h| h.db_id == db_id)
            .with_context(|| format!("unknown database {db_id}"))
    }

    pub fn selected(&self, db: Option<&str>) -> anyhow::Result<Vec<&DatabaseHandle>> {
        match db {
            Some(id) => Ok(vec![self.handle(id)?]),
            None => Ok(self.handles.iter().collect()),
        }
    }

    pub fn schema(&self, h: &DatabaseHandle) -> anyhow::Result<DatabaseSchema> {
        let overlay = load_overlay(h)?;
        Ok(introspect_schema(h, overlay.as_ref())?)
    }

    pub fn schemas(&self) -> anyhow::Result<BTreeMap<String, DatabaseSchema>> {
        self.handles
            .iter()
            .map(|h| Ok((h.db_id.clone(), self.schema(h)?)))
            .collect()
    }

    pub fn db_map(&self) -> BTreeMap<String, DatabaseHandle> {
        self.handles
            .iter()
            .map(|h| (h.db_id.clone(), h.clone()))
            .collect()
    }

    pub fn fingerprint(&self) -> String {
        index_fingerprint(self.provider.as_ref(), self.head.as_ref())
    }

    /// Builds and persists the index of `h` unless the stored one is current
    /// (or `force` is set).
    pub fn build_index(&self, h: &DatabaseHandle, force: bool) -> anyhow::Result<IndexStatus> {
        let schema = self.schema(h)?;
        let path = index_path(&self.cfg, &h.db_id);
        if !force && path.is_file() {
            if let Ok(existing) = Index::load(&path) {
                if index_is_current(&existing, &schema, &self.fingerprint()) {
                    return Ok(IndexStatus::Unchanged);
                }
            }
        }
        let idx = build_index(&schema, self.provider.as_ref(), self.head.as_ref())?;
        std::fs::create_dir_all(&self.cfg.index_dir)
            .with_context(|| format!("creating {}", self.cfg.index_dir.display()))?;
        idx.persist(&path)?;
        Ok(IndexStatus::Written)
    }

    /// Loads the stored index of `h`, rebuilding it in memory when missing or
    /// stale.
    pub fn bundle(&self, h: &DatabaseHandle) -> anyhow::Result<DatabaseBundle> {
        let schema = self.schema(h)?;
        let path = index_path(&self.cfg, &h.db_id);
        let stored = path.is_file().then(|| Index::load(&path)).transpose();
        let index = match stored {
            Ok(Some(idx)) if index_is_current(&idx, &schema, &self.fingerprint()) => idx,
            other => {
                match other {
                    Err(e) => log::warn!("index {}: {e}; rebuilding", path.display()),
                    Ok(Some(_)) => log::warn!("index {} is stale; rebuilding", path.display()),
                    Ok(None) => log::info!("no index for {}; building in memory", h.db_id),
                }
                build_index(&schema, self.provider.as_ref(), self.head.as_ref())?
            }
        };
        Ok(DatabaseBundle {
            handle: h.clone(),
            schema,
            index,
        })
    }

    pub fn catalog(&self, only: Option<&str>) -> anyhow::Result<Catalog> {
        self.selected(only)?
            .into_iter()
            .map(|h| Ok((h.db_id.clone(), self.bundle(h)?)))
            .collect()
    }
}
