//! Scoped multiply-accumulate counting.
//!
//! Kernels report MACs through [`record`]; every scope active on the current
//! thread receives the count. Scopes may nest (an outer scope sees the work of
//! inner ones) but two live scopes on one thread may not share a name.

use std::cell::RefCell;
use std::marker::PhantomData;

use crate::error::{Error, Result};

thread_local! {
    static SCOPES: RefCell<Vec<(String, u64)>> = const { RefCell::new(Vec::new()) };
}

pub(crate) fn record(macs: u64) {
    SCOPES.with(|s| {
        for entry in s.borrow_mut().iter_mut() {
            entry.1 += macs;
        }
    });
}

/// Guard for an active counting scope. Dropping it ends the scope.
#[derive(Debug)]
pub struct MacScope {
    name: String,
    // thread-local state: the guard must stay on the thread that opened it
    _local: PhantomData<*const ()>,
}

impl MacScope {
    pub fn enter(name: &str) -> Result<Self> {
        SCOPES.with(|s| {
            let mut s = s.borrow_mut();
            if s.iter().any(|(n, _)| n == name) {
                return Err(Error::DuplicateScope(name.to_string()));
            }
            s.push((name.to_string(), 0));
            Ok(Self {
                name: name.to_string(),
                _local: PhantomData,
            })
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// MACs recorded since the scope was entered.
    pub fn count(&self) -> u64 {
        SCOPES.with(|s| s.borrow().iter().find(|(n, _)| *n == self.name).map_or(0, |(_, c)| *c))
    }

    pub fn finish(self) -> u64 {
        self.count()
    }
}

impl Drop for MacScope {
    fn drop(&mut self) {
        SCOPES.with(|s| {
            let mut s = s.borrow_mut();
            if let Some(pos) = s.iter().position(|(n, _)| *n == self.name) {
                s.remove(pos);
            }
        });
    }
}

/// Runs `f` inside a fresh scope and returns its result with the MAC count.
pub fn count_macs<R>(name: &str, f: impl FnOnce() -> R) -> Result<(R, u64)> {
    let scope = MacScope::enter(name)?;
    let r = f();
    Ok((r, scope.finish()))
}
